//! Training loops, scheduled-sampling schedule, early stopping and the
//! learning-rate × hidden-size grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datahub::WindowSample;
use crate::error::{Error, Result};
use crate::fluenet::{
    inference_mse, reached_gradients, Batch, CellKind, ModelConfig, ModelParams, QueryMode,
};
use crate::numkit::{derive_seed, AdamState, Rng, Tensor2};

/// How the teacher-forcing probability evolves over epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EpsilonSchedule {
    /// `1 − (epoch − 1) / (max_epochs − 1)`.
    Linear,
    Constant(f64),
}

impl std::str::FromStr for EpsilonSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "linear" => Ok(Self::Linear),
            other => {
                let p = other
                    .strip_prefix("constant:")
                    .and_then(|v| v.trim().parse::<f64>().ok())
                    .filter(|p| (0.0..=1.0).contains(p))
                    .ok_or_else(|| {
                        Error::Param(format!(
                            "bad epsilon schedule `{other}` (linear | constant:<p>)"
                        ))
                    })?;
                Ok(Self::Constant(p))
            }
        }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_grid: Vec<f64>,
    pub hidden_grid: Vec<usize>,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub epsilon: EpsilonSchedule,
    pub seed: u64,
    /// Countries for multi-task training, in id order. Empty means "whatever
    /// the data holds, in the order given".
    pub roster: Vec<String>,
    /// Learned initial encoder state per country (multi-task only).
    pub country_embedding: bool,
    pub use_queries: bool,
    pub cell: CellKind,
    pub shared_fusion: bool,
    /// Plain GRU baseline: raw ILI, queries as extra encoder inputs, no attention.
    pub plain_gru: bool,
    /// Run grid points on the rayon pool.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_grid: vec![0.001, 0.01, 0.1, 1.0],
            hidden_grid: vec![8, 16, 32, 64],
            max_epochs: 300,
            patience: 20,
            batch_size: 32,
            epsilon: EpsilonSchedule::Linear,
            seed: 0,
            roster: Vec::new(),
            country_embedding: true,
            use_queries: true,
            cell: CellKind::Literal,
            shared_fusion: true,
            plain_gru: false,
            parallel: true,
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Param(format!("{key}: cannot parse `{s}`")))
        })
        .collect()
}

fn parse_one<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Param(format!("{key}: cannot parse `{value}`")))
}

/// Parse `key = value` lines. `#` starts a comment; blank lines are skipped;
/// a later duplicate key overrides an earlier one.
pub fn parse_key_values(text: &str, source: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_grid.is_empty() || self.hidden_grid.is_empty() {
            return Err(Error::Param(
                "learning-rate and hidden-size grids must be nonempty".into(),
            ));
        }
        if let Some(lr) = self.lr_grid.iter().find(|v| !v.is_finite() || **v <= 0.0) {
            return Err(Error::Param(format!("learning rate {lr} must be positive")));
        }
        if self.hidden_grid.contains(&0) {
            return Err(Error::Param("hidden size must be ≥ 1".into()));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Param(
                "patience, batch size and max epochs must be ≥ 1".into(),
            ));
        }
        Ok(())
    }

    /// Set one field from its text form. Returns false for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lr_grid" => self.lr_grid = parse_list(key, value)?,
            "hidden_grid" => self.hidden_grid = parse_list(key, value)?,
            "max_epochs" => self.max_epochs = parse_one(key, value)?,
            "patience" => self.patience = parse_one(key, value)?,
            "batch_size" => self.batch_size = parse_one(key, value)?,
            "epsilon" => self.epsilon = value.parse()?,
            "seed" => self.seed = parse_one(key, value)?,
            "roster" => self.roster = parse_list(key, value)?,
            "country_embedding" => self.country_embedding = parse_one(key, value)?,
            "use_queries" => self.use_queries = parse_one(key, value)?,
            "cell" => {
                self.cell = match value.trim() {
                    "literal" => CellKind::Literal,
                    "standard" => CellKind::Standard,
                    other => return Err(Error::Param(format!("cell: unknown kind `{other}`"))),
                }
            }
            "shared_fusion" => self.shared_fusion = parse_one(key, value)?,
            "plain_gru" => self.plain_gru = parse_one(key, value)?,
            "parallel" => self.parallel = parse_one(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Apply every `<prefix>key` entry; other entries are ignored. Unknown
    /// keys under the prefix are an error.
    pub fn apply(&mut self, entries: &BTreeMap<String, String>, prefix: &str) -> Result<()> {
        for (k, v) in entries {
            if let Some(key) = k.strip_prefix(prefix) {
                if !self.set(key, v)? {
                    return Err(Error::Param(format!("unknown training key `{k}`")));
                }
            }
        }
        self.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply(&parse_key_values(&text, &path.display().to_string())?, "")?;
        Ok(cfg)
    }
}

/// Mean squared error over all entries.
pub fn mse_loss(pred: &Tensor2, target: &Tensor2) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("mse_loss", pred.shape(), target.shape()));
    }
    if pred.is_empty() {
        return Err(Error::Contract("mse of empty tensors".into()));
    }
    let sse: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok(sse / pred.len() as f64)
}

/// Teacher-forcing probability for a 1-based epoch.
pub fn epsilon_at(schedule: EpsilonSchedule, epoch: usize, max_epochs: usize) -> f64 {
    match schedule {
        EpsilonSchedule::Constant(p) => p,
        EpsilonSchedule::Linear if max_epochs <= 1 => 1.0,
        EpsilonSchedule::Linear => {
            let e = epoch.clamp(1, max_epochs);
            (1.0 - (e - 1) as f64 / (max_epochs - 1) as f64).clamp(0.0, 1.0)
        }
    }
}

/// Training and validation windows of one country.
#[derive(Debug, Clone)]
pub struct CountryData {
    pub country: String,
    pub train: Vec<WindowSample>,
    pub validation: Vec<WindowSample>,
}

/// Pick a country uniformly, then a batch from its training windows: without
/// replacement, or with replacement when it has fewer than `batch_size`.
pub fn sample_country_batch<'a>(
    rng: &mut Rng,
    data: &'a [CountryData],
    batch_size: usize,
) -> Result<(usize, Vec<&'a WindowSample>)> {
    if data.is_empty() {
        return Err(Error::Contract("no countries to sample from".into()));
    }
    let c = rng.below(data.len());
    let pool = &data[c].train;
    if pool.is_empty() {
        return Err(Error::InsufficientData {
            what: format!("{}: training windows", data[c].country),
            required: 1,
            available: 0,
        });
    }
    let picks = if pool.len() < batch_size {
        (0..batch_size)
            .map(|_| &pool[rng.below(pool.len())])
            .collect()
    } else {
        // Partial Fisher-Yates over indices.
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        for i in 0..batch_size {
            let j = i + rng.below(pool.len() - i);
            idx.swap(i, j);
        }
        idx[..batch_size].iter().map(|&i| &pool[i]).collect()
    };
    Ok((c, picks))
}

/// Initial encoder state used for `country`: its embedding row, or zeros
/// when the model has no country embedding.
pub fn apply_country_embedding(model: &ModelParams, country: &str) -> Result<Vec<f64>> {
    let id = model.config.country_id(country)?;
    if !model.config.country_embedding {
        return Ok(vec![0.0; model.config.hidden]);
    }
    Ok(model
        .store
        .get("country_embedding.weight")?
        .row(id - 1)
        .to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Single,
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    /// One entry per country, in roster order.
    pub val_mse: Vec<f64>,
}

impl EpochRecord {
    pub fn mean_val(&self) -> f64 {
        self.val_mse.iter().sum::<f64>() / self.val_mse.len() as f64
    }
}

/// Per-epoch history of the selected grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub countries: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub chosen_epoch: usize,
    pub lr: f64,
    pub hidden: usize,
    /// Not written to CSV, so logs of identical runs compare equal on disk.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_mse");
        for c in &self.countries {
            let _ = write!(s, ",val_mse_{c}");
        }
        s.push('\n');
        for e in &self.epochs {
            let _ = write!(s, "{},{:?}", e.epoch, e.train_mse);
            for v in &e.val_mse {
                let _ = write!(s, ",{v:?}");
            }
            s.push('\n');
        }
        s
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.chosen_epoch)
    }
}

/// Result of one (lr, M) grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub lr: f64,
    pub hidden: usize,
    /// Mean validation MSE at the chosen epoch; `None` if training diverged.
    pub best_val_mse: Option<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

pub fn grid_csv(outcomes: &[GridOutcome]) -> String {
    let mut s = String::from("lr,hidden,status,best_epoch,epochs_run,best_val_mse\n");
    for g in outcomes {
        let (status, val) = match g.best_val_mse {
            Some(v) => ("ok", format!("{v:?}")),
            None => ("diverged", String::new()),
        };
        let _ = writeln!(
            s,
            "{:?},{},{status},{},{},{val}",
            g.lr, g.hidden, g.best_epoch, g.epochs_run
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: ModelParams,
    pub log: TrainLog,
    pub grid: Vec<GridOutcome>,
}

struct Shapes {
    n: usize,
    s: usize,
    l: usize,
}

fn check_data(data: &[CountryData], mode: Mode, use_queries: bool) -> Result<Shapes> {
    match mode {
        Mode::Single if data.len() != 1 => {
            return Err(Error::Param(format!(
                "single-task training takes one country, got {}",
                data.len()
            )))
        }
        Mode::Multi if data.len() < 2 => {
            return Err(Error::Param(
                "multi-task training needs at least two countries".into(),
            ))
        }
        _ => {}
    }
    let first = data
        .iter()
        .flat_map(|d| d.train.first())
        .next()
        .ok_or_else(|| Error::Contract("no training windows".into()))?;
    let shapes = Shapes {
        n: first.n(),
        s: first.s(),
        l: if use_queries { first.num_queries() } else { 0 },
    };
    for d in data {
        for (part, windows) in [("training", &d.train), ("validation", &d.validation)] {
            if windows.is_empty() {
                return Err(Error::InsufficientData {
                    what: format!("{}: {part} windows", d.country),
                    required: 1,
                    available: 0,
                });
            }
            for w in windows {
                if w.country != d.country {
                    return Err(Error::Contract(format!(
                        "{} window filed under {}",
                        w.country, d.country
                    )));
                }
                if w.n() != shapes.n
                    || w.s() != shapes.s
                    || (use_queries && w.num_queries() != shapes.l)
                {
                    return Err(Error::shape(
                        "training window",
                        (w.n(), w.s()),
                        (shapes.n, shapes.s),
                    ));
                }
            }
        }
    }
    if use_queries && shapes.l == 0 {
        return Err(Error::Param(
            "queries requested but windows carry none".into(),
        ));
    }
    Ok(shapes)
}

fn model_config(
    cfg: &TrainConfig,
    shapes: &Shapes,
    roster: Vec<String>,
    hidden: usize,
    mode: Mode,
) -> ModelConfig {
    let mut mc = ModelConfig::new(hidden, shapes.n, shapes.s, shapes.l, roster);
    mc.cell = cfg.cell;
    mc.query_mode = match (cfg.use_queries, cfg.plain_gru) {
        (false, _) => QueryMode::None,
        (true, false) => QueryMode::Attention,
        (true, true) => QueryMode::Concat,
    };
    mc.deseasonalize = !cfg.plain_gru;
    mc.country_embedding = mode == Mode::Multi && cfg.country_embedding;
    mc.shared_fusion = cfg.shared_fusion;
    mc
}

/// Order `data` by the configured roster (if any).
fn arrange(cfg: &TrainConfig, data: &[CountryData]) -> Result<Vec<CountryData>> {
    if cfg.roster.is_empty() {
        return Ok(data.to_vec());
    }
    if cfg.roster.len() != data.len() {
        return Err(Error::Param(format!(
            "roster lists {} countries, data has {}",
            cfg.roster.len(),
            data.len()
        )));
    }
    cfg.roster
        .iter()
        .map(|c| {
            data.iter()
                .find(|d| &d.country == c)
                .cloned()
                .ok_or_else(|| Error::UnknownCountry(c.clone()))
        })
        .collect()
}

/// Train one model of the given architecture. Returns the best-epoch model,
/// its log, or `None` when training diverged.
pub fn train_model(
    cfg: &TrainConfig,
    model_config: ModelConfig,
    lr: f64,
    data: &[CountryData],
    mode: Mode,
    seed: u64,
) -> Result<Option<(ModelParams, TrainLog)>> {
    let started = Instant::now();
    let root = Rng::new(seed);
    let mut model = ModelParams::init(model_config, &mut root.fork("init"))?;
    let mut batch_rng = root.fork("batches");
    let mut sampling_rng = root.fork("sampling");
    let mut adam = AdamState::new(lr, &model.store.shapes());

    let total: usize = data.iter().map(|d| d.train.len()).sum();
    let steps_per_epoch = total.div_ceil(cfg.batch_size);
    let mut log = TrainLog {
        countries: data.iter().map(|d| d.country.clone()).collect(),
        epochs: Vec::new(),
        chosen_epoch: 0,
        lr,
        hidden: model.config.hidden,
        wall_time_secs: 0.0,
    };
    let mut best: Option<(f64, ModelParams)> = None;

    for epoch in 1..=cfg.max_epochs {
        let eps = epsilon_at(cfg.epsilon, epoch, cfg.max_epochs);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;

        let batches: Vec<Vec<&WindowSample>> = match mode {
            Mode::Single => {
                let mut order: Vec<&WindowSample> = data[0].train.iter().collect();
                batch_rng.shuffle(&mut order);
                order.chunks(cfg.batch_size).map(<[_]>::to_vec).collect()
            }
            Mode::Multi => (0..steps_per_epoch)
                .map(|_| sample_country_batch(&mut batch_rng, data, cfg.batch_size).map(|(_, b)| b))
                .collect::<Result<_>>()?,
        };
        for windows in &batches {
            let batch = Batch::from_windows(&model.config, windows)?;
            let step = reached_gradients(&model, &batch, eps, &mut sampling_rng).and_then(
                |(loss, grads)| {
                    let grads: Vec<Option<&Tensor2>> = grads.iter().map(Option::as_ref).collect();
                    adam.step_some(&mut model.store.tensors_mut(), &grads)
                        .map(|_| loss)
                },
            );
            match step {
                Ok(loss) => {
                    loss_sum += loss;
                    steps += 1;
                }
                Err(Error::NonFinite(op)) => {
                    log::warn!(
                        "lr={lr} M={}: diverged in epoch {epoch} ({op})",
                        model.config.hidden
                    );
                    return Ok(None);
                }
                Err(e) => return Err(e),
            }
        }

        let mut val = Vec::with_capacity(data.len());
        for d in data {
            match inference_mse(&model, &d.validation) {
                Ok(v) if v.is_finite() => val.push(v),
                Ok(_) | Err(Error::NonFinite(_)) => {
                    log::warn!(
                        "lr={lr} M={}: validation diverged in epoch {epoch}",
                        model.config.hidden
                    );
                    return Ok(None);
                }
                Err(e) => return Err(e),
            }
        }
        let record = EpochRecord {
            epoch,
            train_mse: loss_sum / steps as f64,
            val_mse: val,
        };
        let mean = record.mean_val();
        log.epochs.push(record);
        if best.as_ref().is_none_or(|(b, _)| mean < *b) {
            best = Some((mean, model.clone()));
            log.chosen_epoch = epoch;
        } else if epoch - log.chosen_epoch >= cfg.patience {
            break;
        }
    }
    log.wall_time_secs = started.elapsed().as_secs_f64();
    let (_, model) = best.expect("at least one epoch ran");
    Ok(Some((model, log)))
}

/// Grid search over learning rate and hidden size. Grid points get seeds
/// derived from `(seed, index)`, so the result does not depend on whether
/// they run in parallel.
pub fn fit(cfg: &TrainConfig, data: &[CountryData], mode: Mode) -> Result<FitResult> {
    cfg.validate()?;
    let data = arrange(cfg, data)?;
    let shapes = check_data(&data, mode, cfg.use_queries)?;
    let roster: Vec<String> = data.iter().map(|d| d.country.clone()).collect();

    let points: Vec<(usize, f64, usize)> = cfg
        .lr_grid
        .iter()
        .flat_map(|&lr| cfg.hidden_grid.iter().map(move |&m| (lr, m)))
        .enumerate()
        .map(|(i, (lr, m))| (i, lr, m))
        .collect();
    let run = |&(i, lr, m): &(usize, f64, usize)| {
        let mc = model_config(cfg, &shapes, roster.clone(), m, mode);
        let seed = derive_seed(cfg.seed, &format!("grid.{i}"));
        log::info!("grid point {i}: lr={lr} M={m}");
        train_model(cfg, mc, lr, &data, mode, seed)
    };
    let results: Vec<Result<Option<(ModelParams, TrainLog)>>> = if cfg.parallel {
        points.par_iter().map(run).collect()
    } else {
        points.iter().map(run).collect()
    };

    let mut grid = Vec::with_capacity(points.len());
    let mut chosen: Option<(f64, ModelParams, TrainLog)> = None;
    for (&(_, lr, m), r) in points.iter().zip(results) {
        match r? {
            Some((model, log)) => {
                let score = log
                    .best()
                    .map(EpochRecord::mean_val)
                    .unwrap_or(f64::INFINITY);
                grid.push(GridOutcome {
                    lr,
                    hidden: m,
                    best_val_mse: Some(score),
                    best_epoch: log.chosen_epoch,
                    epochs_run: log.epochs.len(),
                });
                if chosen.as_ref().is_none_or(|(s, _, _)| score < *s) {
                    chosen = Some((score, model, log));
                }
            }
            None => grid.push(GridOutcome {
                lr,
                hidden: m,
                best_val_mse: None,
                best_epoch: 0,
                epochs_run: 0,
            }),
        }
    }
    let (_, model, log) =
        chosen.ok_or_else(|| Error::Degenerate("every grid point diverged".into()))?;
    Ok(FitResult { model, log, grid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datahub::IsoWeek;

    #[test]
    fn mse_examples() {
        let a = Tensor2::from_rows(&[&[1.0, 1.0]]);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(mse_loss(&a, &Tensor2::zeros(1, 2)).unwrap(), 1.0);
        let p = Tensor2::from_rows(&[&[1.0, 2.0]]);
        let o = Tensor2::from_rows(&[&[0.0, 4.0]]);
        assert_eq!(mse_loss(&p, &o).unwrap(), 2.5);
        assert!(matches!(
            mse_loss(&p, &Tensor2::zeros(2, 1)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn epsilon_schedule() {
        assert_eq!(epsilon_at(EpsilonSchedule::Linear, 1, 300), 1.0);
        assert_eq!(epsilon_at(EpsilonSchedule::Linear, 300, 300), 0.0);
        let mid = epsilon_at(EpsilonSchedule::Linear, 150, 300);
        assert!((mid - (1.0 - 149.0 / 299.0)).abs() < 1e-15);
        assert!((mid - 0.5017).abs() < 1e-4);
        let next = epsilon_at(EpsilonSchedule::Linear, 151, 300);
        assert!((next - 0.4983).abs() < 1e-4);
        assert_eq!(epsilon_at(EpsilonSchedule::Constant(0.3), 7, 300), 0.3);
        assert_eq!(
            "constant:0.25".parse::<EpsilonSchedule>().unwrap(),
            EpsilonSchedule::Constant(0.25)
        );
        assert!("constant:2".parse::<EpsilonSchedule>().is_err());
    }

    #[test]
    fn config_from_key_values() {
        let text = "# grid\ntrain.lr_grid = 0.01, 0.1\ntrain.hidden_grid=16\ntrain.patience = 5\ntrain.epsilon = constant:0.5\ndata.ili = x.csv\n";
        let kv = parse_key_values(text, "cfg").unwrap();
        let mut cfg = TrainConfig::default();
        cfg.apply(&kv, "train.").unwrap();
        assert_eq!(cfg.lr_grid, vec![0.01, 0.1]);
        assert_eq!(cfg.hidden_grid, vec![16]);
        assert_eq!(cfg.patience, 5);
        assert_eq!(cfg.max_epochs, 300);
        assert_eq!(cfg.epsilon, EpsilonSchedule::Constant(0.5));

        let bad = parse_key_values("train.learning_rate = 3", "cfg").unwrap();
        assert!(TrainConfig::default().apply(&bad, "train.").is_err());
        let empty = parse_key_values("train.lr_grid =", "cfg").unwrap();
        assert!(TrainConfig::default().apply(&empty, "train.").is_err());
        assert!(matches!(
            parse_key_values("a = 1\nnonsense\n", "cfg"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    fn windows(
        country: &str,
        count: usize,
        rng: &mut Rng,
        n: usize,
        s: usize,
        l: usize,
    ) -> Vec<WindowSample> {
        // Smooth series so a small network can fit it.
        let phase = rng.uniform(0.0, 6.0);
        let len = count + n + s;
        let y: Vec<f64> = (0..len)
            .map(|t| 1.0 + 0.5 * ((t as f64) / 6.0 + phase).sin())
            .collect();
        (0..count)
            .map(|k| {
                let input = y[k..k + n].to_vec();
                let target = y[k + n..k + n + s].to_vec();
                let queries = Tensor2::new(
                    n,
                    l,
                    (0..n * l).map(|i| y[k + i / l.max(1)] * 0.5).collect(),
                )
                .unwrap();
                WindowSample {
                    country: country.into(),
                    origin: IsoWeek::EPOCH.offset((k + n) as i64),
                    input_deseason: input.clone(),
                    input,
                    queries,
                    target_deseason: target.clone(),
                    target,
                    seasonal: vec![0.0; s],
                    next_queries: None,
                }
            })
            .collect()
    }

    fn dataset(countries: &[&str], count: usize, seed: u64) -> Vec<CountryData> {
        let mut rng = Rng::new(seed);
        countries
            .iter()
            .map(|c| {
                let w = windows(c, count, &mut rng, 8, 2, 2);
                CountryData {
                    country: c.to_string(),
                    validation: w[count - 5..].to_vec(),
                    train: w,
                }
            })
            .collect()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            lr_grid: vec![0.01, 0.1],
            hidden_grid: vec![4],
            max_epochs: 6,
            patience: 3,
            batch_size: 8,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn batch_sampling_is_uniform_and_pure() {
        let data = dataset(&["US", "FR", "JP", "UK", "AU"], 20, 1);
        let mut rng = Rng::new(5);
        let mut counts = [0usize; 5];
        let draws = 10_000;
        for _ in 0..draws {
            let (c, batch) = sample_country_batch(&mut rng, &data, 8).unwrap();
            counts[c] += 1;
            assert!(batch.iter().all(|w| w.country == data[c].country));
            let mut origins: Vec<_> = batch.iter().map(|w| w.origin).collect();
            origins.sort();
            origins.dedup();
            assert_eq!(origins.len(), 8);
        }
        let sigma = (draws as f64 * 0.2 * 0.8).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * 0.2).abs() < 5.0 * sigma);
        }
        let one = &data[..1];
        let (c, batch) = sample_country_batch(&mut rng, one, 50).unwrap();
        assert_eq!((c, batch.len()), (0, 50));
    }

    #[test]
    fn embedding_lookup() {
        let mut rng = Rng::new(2);
        let roster = vec!["US".to_string(), "JP".to_string()];
        let mut mc = ModelConfig::new(4, 3, 1, 0, roster.clone());
        assert_eq!(
            apply_country_embedding(&ModelParams::init(mc.clone(), &mut rng).unwrap(), "JP")
                .unwrap(),
            vec![0.0; 4]
        );
        mc.country_embedding = true;
        assert_eq!(
            apply_country_embedding(&ModelParams::zeros(mc.clone()).unwrap(), "US").unwrap(),
            vec![0.0; 4]
        );
        let model = ModelParams::init(mc, &mut rng).unwrap();
        let us = apply_country_embedding(&model, "US").unwrap();
        let jp = apply_country_embedding(&model, "JP").unwrap();
        assert_ne!(us, jp);
        assert!(matches!(
            apply_country_embedding(&model, "DE"),
            Err(Error::UnknownCountry(_))
        ));
    }

    #[test]
    fn fit_is_reproducible() {
        let data = dataset(&["US", "JP"], 30, 9);
        let cfg = small_cfg();
        let a = fit(&cfg, &data, Mode::Multi).unwrap();
        let b = fit(
            &TrainConfig {
                parallel: false,
                ..cfg
            },
            &data,
            Mode::Multi,
        )
        .unwrap();
        assert_eq!(a.log.to_csv(), b.log.to_csv());
        assert_eq!(a.grid, b.grid);
        for ((_, x), (_, y)) in a.model.store.iter().zip(b.model.store.iter()) {
            assert!(x
                .data()
                .iter()
                .zip(y.data())
                .all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn early_stop_keeps_best_epoch() {
        let data = dataset(&["US"], 40, 4);
        let cfg = TrainConfig {
            lr_grid: vec![0.1],
            max_epochs: 40,
            patience: 2,
            ..small_cfg()
        };
        let r = fit(&cfg, &data, Mode::Single).unwrap();
        let best = r.log.best().unwrap().mean_val();
        assert!(r
            .log
            .epochs
            .iter()
            .filter(|e| e.epoch > r.log.chosen_epoch)
            .all(|e| e.mean_val() >= best));
        for (i, e) in r.log.epochs.iter().enumerate() {
            assert_eq!(e.epoch, i + 1);
        }
        let restored = inference_mse(&r.model, &data[0].validation).unwrap();
        assert!((restored - best).abs() <= 1e-12 * best.max(1.0));
    }

    #[test]
    fn overfits_fifty_windows() {
        let data = dataset(&["US"], 50, 12);
        let mut data = data;
        data[0].validation = data[0].train.clone();
        let cfg = TrainConfig {
            lr_grid: vec![0.01],
            hidden_grid: vec![16],
            max_epochs: 300,
            patience: 300,
            ..small_cfg()
        };
        let shapes = check_data(&data, Mode::Single, true).unwrap();
        let mc = model_config(&cfg, &shapes, vec!["US".into()], 16, Mode::Single);
        let seed = derive_seed(cfg.seed, "grid.0");
        let init = ModelParams::init(mc, &mut Rng::new(seed).fork("init")).unwrap();
        let before = inference_mse(&init, &data[0].train).unwrap();
        let r = fit(&cfg, &data, Mode::Single).unwrap();
        let after = inference_mse(&r.model, &data[0].train).unwrap();
        assert!(after < 0.01 * before, "initial {before}, final {after}");
    }

    #[test]
    fn multi_task_partition() {
        let data = dataset(&["US", "JP", "FR"], 24, 6);
        let r = fit(&small_cfg(), &data, Mode::Multi).unwrap();
        let store = &r.model.store;
        assert!(store
            .names()
            .filter(|n| ModelParams::is_shared(n))
            .all(|n| !n.contains("US") && !n.contains("JP")));
        let us = store.get("country.US.output.hidden.weight").unwrap();
        let jp = store.get("country.JP.output.hidden.weight").unwrap();
        assert!(us.max_abs_diff(jp) > 0.0);
        assert!(store.contains("country_embedding.weight"));
        assert_eq!(r.grid.len(), 2);
    }

    #[test]
    fn single_mode_rejects_many_countries() {
        let data = dataset(&["US", "JP"], 20, 1);
        assert!(fit(&small_cfg(), &data, Mode::Single).is_err());
        assert!(fit(&small_cfg(), &data[..1], Mode::Multi).is_err());
    }

    #[test]
    fn huge_learning_rate_is_skipped_not_fatal() {
        let data = dataset(&["US"], 20, 2);
        let cfg = TrainConfig {
            lr_grid: vec![0.01, 1e200],
            ..small_cfg()
        };
        let r = fit(&cfg, &data, Mode::Single).unwrap();
        assert_eq!(r.grid[1].best_val_mse, None);
        assert_eq!(r.log.lr, 0.01);
        assert!(grid_csv(&r.grid).contains("diverged"));
    }

    #[test]
    fn log_csv_layout() {
        let log = TrainLog {
            countries: vec!["US".into(), "JP".into()],
            epochs: vec![EpochRecord {
                epoch: 1,
                train_mse: 0.5,
                val_mse: vec![0.25, 0.125],
            }],
            chosen_epoch: 1,
            lr: 0.01,
            hidden: 8,
            wall_time_secs: 3.0,
        };
        assert_eq!(
            log.to_csv(),
            "epoch,train_mse,val_mse_US,val_mse_JP\n1,0.5,0.25,0.125\n"
        );
    }
}
