use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flucast::datahub::IsoWeek;
use flucast::trainer::{parse_key_values, TrainConfig};

/// One evaluation year: the test period starts at `test_start` and runs
/// `test_weeks`; validation and training come before it.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub name: String,
    pub test_start: IsoWeek,
    pub test_weeks: usize,
}

/// Everything a run needs, read from a flat `key = value` file.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub ili: Option<PathBuf>,
    /// Holds one directory of trend CSVs per country.
    pub trends_dir: Option<PathBuf>,
    /// English seed queries for selection.
    pub english_queries: Option<PathBuf>,
    pub embeddings: BTreeMap<String, PathBuf>,
    pub stopwords: BTreeMap<String, PathBuf>,
    pub mappings: BTreeMap<String, PathBuf>,
    /// Explicit query list per country; otherwise `<out>/<country>/selected_queries.csv`.
    pub queries: BTreeMap<String, PathBuf>,
    pub languages: BTreeMap<String, String>,
    pub countries: Vec<String>,
    pub terms: Vec<Term>,
    pub input_weeks: usize,
    pub horizon: usize,
    pub num_queries: usize,
    pub select_k: usize,
    pub select_max_candidates: usize,
    pub ar_order: usize,
    pub shifts: String,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            ili: None,
            trends_dir: None,
            english_queries: None,
            embeddings: BTreeMap::new(),
            stopwords: BTreeMap::new(),
            mappings: BTreeMap::new(),
            queries: BTreeMap::new(),
            languages: BTreeMap::new(),
            countries: Vec::new(),
            terms: Vec::new(),
            input_weeks: 52,
            horizon: 5,
            num_queries: 10,
            select_k: 100,
            select_max_candidates: 200,
            ar_order: 52,
            shifts: "AU:22".into(),
            seed: 0,
            train: TrainConfig::default(),
        }
    }
}

fn number<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .ok()
        .with_context(|| format!("{key}: cannot parse `{value}`"))
}

fn list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, &path.display().to_string(), base)
    }

    /// Relative paths are resolved against `base`.
    pub fn parse(text: &str, source: &str, base: &Path) -> Result<Self> {
        let entries = parse_key_values(text, source)?;
        let mut cfg = Self::default();
        let resolve = |v: &str| base.join(v);
        let mut term_starts: BTreeMap<String, IsoWeek> = BTreeMap::new();
        let mut term_weeks: BTreeMap<String, usize> = BTreeMap::new();

        for (key, value) in &entries {
            let v = value.as_str();
            match key.as_str() {
                "data.ili" => cfg.ili = Some(resolve(v)),
                "data.trends_dir" => cfg.trends_dir = Some(resolve(v)),
                "data.english_queries" => cfg.english_queries = Some(resolve(v)),
                "countries" => cfg.countries = list(v),
                "seed" => cfg.seed = number(key, v)?,
                "model.input_weeks" => cfg.input_weeks = number(key, v)?,
                "model.horizon" => cfg.horizon = number(key, v)?,
                "model.num_queries" => cfg.num_queries = number(key, v)?,
                "select.k" => cfg.select_k = number(key, v)?,
                "select.max_candidates" => cfg.select_max_candidates = number(key, v)?,
                "baseline.ar_order" => cfg.ar_order = number(key, v)?,
                "correlate.shifts" => cfg.shifts = v.to_string(),
                k if k.starts_with("train.") => {
                    if !cfg.train.set(&k["train.".len()..], v)? {
                        bail!("{source}: unknown key `{k}`");
                    }
                }
                k => {
                    let Some((section, name)) = k.split_once('.') else {
                        bail!("{source}: unknown key `{k}`");
                    };
                    match section {
                        "embeddings" => {
                            cfg.embeddings.insert(name.into(), resolve(v));
                        }
                        "stopwords" => {
                            cfg.stopwords.insert(name.into(), resolve(v));
                        }
                        "mapping" => {
                            cfg.mappings.insert(name.into(), resolve(v));
                        }
                        "queries" => {
                            cfg.queries.insert(name.into(), resolve(v));
                        }
                        "language" => {
                            cfg.languages.insert(name.into(), v.to_string());
                        }
                        "term" => match name.split_once('.') {
                            Some((t, "test_start")) => {
                                term_starts.insert(t.into(), v.parse().with_context(|| format!("{k}: bad week `{v}`"))?);
                            }
                            Some((t, "test_weeks")) => {
                                term_weeks.insert(t.into(), number(k, v)?);
                            }
                            _ => bail!("{source}: unknown key `{k}` (expected term.<name>.test_start or .test_weeks)"),
                        },
                        _ => bail!("{source}: unknown key `{k}`"),
                    }
                }
            }
        }

        if let Some(t) = term_weeks.keys().find(|t| !term_starts.contains_key(*t)) {
            bail!("{source}: term `{t}` has test_weeks but no test_start");
        }
        cfg.terms = term_starts
            .into_iter()
            .map(|(name, test_start)| {
                let test_weeks = term_weeks.get(&name).copied().unwrap_or(52);
                Term {
                    name,
                    test_start,
                    test_weeks,
                }
            })
            .collect();
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_weeks == 0 || self.horizon == 0 {
            bail!("model.input_weeks and model.horizon must be ≥ 1");
        }
        if self.terms.iter().any(|t| t.test_weeks == 0) {
            bail!("term test_weeks must be ≥ 1");
        }
        self.train.validate()?;
        Ok(())
    }

    /// Override the seed everywhere it flows.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn ili_path(&self) -> Result<&Path> {
        let p = self.ili.as_deref().context("config has no `data.ili`")?;
        if !p.is_file() {
            bail!("ILI file {} does not exist", p.display());
        }
        Ok(p)
    }

    pub fn trends_dir(&self, country: &str) -> Result<PathBuf> {
        let dir = self
            .trends_dir
            .as_deref()
            .context("config has no `data.trends_dir`")?
            .join(country);
        if !dir.is_dir() {
            bail!("trends directory {} does not exist", dir.display());
        }
        Ok(dir)
    }

    pub fn language(&self, country: &str) -> &str {
        self.languages.get(country).map_or("en", String::as_str)
    }

    /// `--term` when given, else the only configured term.
    pub fn term(&self, name: Option<&str>) -> Result<&Term> {
        match name {
            Some(n) => self
                .terms
                .iter()
                .find(|t| t.name == n)
                .with_context(|| format!("no term `{n}` in config")),
            None => match self.terms.as_slice() {
                [t] => Ok(t),
                [] => bail!("config defines no term (term.<name>.test_start)"),
                many => bail!(
                    "config defines several terms ({}); pick one with --term",
                    many.iter()
                        .map(|t| t.name.as_str())
                        .collect::<Vec<_>>()
                        .join(", ")
                ),
            },
        }
    }

    /// Command-line countries win over the config roster.
    pub fn countries(&self, flag: Option<&[String]>) -> Result<Vec<String>> {
        let c = match flag {
            Some(c) if !c.is_empty() => c.to_vec(),
            _ => self.countries.clone(),
        };
        if c.is_empty() {
            bail!("no countries given (use --countries or `countries = ...`)");
        }
        Ok(c)
    }

    pub fn query_list_path(&self, country: &str, out: &Path) -> PathBuf {
        self.queries
            .get(country)
            .cloned()
            .unwrap_or_else(|| out.join(country).join("selected_queries.csv"))
    }
}
