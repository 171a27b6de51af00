use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use flucast::datahub::{read_query_list, split_plan, IsoWeek};
use flucast::decompose::stl_decompose;
use flucast::evalbench::{
    attention_csv, correlation_report, evaluate, fit_ar_exog, forecasts_csv, parse_shifts,
    render_table, report_csv, AttentionRow, EvalReport, NetForecaster, SeasonalNaive,
};
use flucast::fluenet::{forecast, Checkpoint, ModelParams, QueryMode};
use flucast::numkit::derive_seed;
use flucast::querysel::{
    builtin_stopwords, load_stopwords, translation_select, write_selected, wt_select, DirTrends,
    EmbeddingTable, Selection, WtParams,
};
use flucast::trainer::{fit, grid_csv, FitResult, Mode, TrainConfig};

use crate::config::ExperimentConfig;
use crate::pipeline::{
    forecast_window, load_series, prepare, query_list, stl_params, Prepared, Queries,
};

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn opt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:?}")
    } else {
        String::new()
    }
}

pub fn decompose(cfg: &ExperimentConfig, out: &Path, countries: &[String]) -> Result<Vec<PathBuf>> {
    let series = load_series(cfg, countries)?;
    let mut written = Vec::new();
    for (country, s) in &series {
        let d =
            stl_decompose(s, &stl_params()).with_context(|| format!("decomposing {country}"))?;
        let mut text = String::from("iso_week,observed,trend,seasonal,remainder\n");
        for (i, (week, obs)) in s.weeks().zip(s.values()).enumerate() {
            let (t, se, r) = (d.trend[i], d.seasonal[i], d.remainder[i]);
            let err = (t + se + r - obs).abs();
            ensure!(
                err <= 1e-9 * obs.abs().max(1.0),
                "{country} {week}: trend + seasonal + remainder is off by {err:e}"
            );
            let _ = writeln!(text, "{week},{obs:?},{t:?},{se:?},{r:?}");
        }
        let path = out.join(format!("decomp_{country}.csv"));
        write_file(&path, &text)?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SelectMethod {
    Wt,
    Mapping,
}

fn stopwords(cfg: &ExperimentConfig, language: &str) -> Result<HashSet<String>> {
    match cfg.stopwords.get(language) {
        Some(p) => Ok(load_stopwords(p)?),
        None => Ok(builtin_stopwords(language).unwrap_or_else(|| {
            log::warn!("no stopword list for `{language}`; every token counts as content");
            HashSet::new()
        })),
    }
}

pub fn select_queries(
    cfg: &ExperimentConfig,
    out: &Path,
    countries: &[String],
    method: SelectMethod,
    term: Option<&str>,
) -> Result<Vec<PathBuf>> {
    let english_path = cfg
        .english_queries
        .as_deref()
        .context("config has no `data.english_queries`")?;
    let english = read_query_list(english_path)?;
    ensure!(
        !english.is_empty(),
        "{} lists no queries",
        english_path.display()
    );
    let mut source: Option<EmbeddingTable> = None;
    let mut written = Vec::new();

    for country in countries {
        let language = cfg.language(country);
        let rows: Vec<Selection> = if language == "en" {
            log::info!("{country}: English-speaking, queries used as is");
            english
                .iter()
                .map(|q| Selection {
                    english: q.clone(),
                    selected: q.clone(),
                    theta_w: None,
                    theta_t: None,
                })
                .collect()
        } else {
            match method {
                SelectMethod::Mapping => {
                    let path = cfg
                        .mappings
                        .get(country)
                        .with_context(|| format!("config has no `mapping.{country}`"))?;
                    let selected = translation_select(path, &english)?;
                    english
                        .iter()
                        .zip(selected)
                        .map(|(e, s)| Selection {
                            english: e.clone(),
                            selected: s,
                            theta_w: None,
                            theta_t: None,
                        })
                        .collect()
                }
                SelectMethod::Wt => {
                    if source.is_none() {
                        let p = cfg
                            .embeddings
                            .get("en")
                            .context("config has no `embeddings.en`")?;
                        source = Some(EmbeddingTable::load(p, "en")?);
                    }
                    let p = cfg
                        .embeddings
                        .get(language)
                        .with_context(|| format!("config has no `embeddings.{language}`"))?;
                    let target = EmbeddingTable::load(p, language)?;
                    let mut stop = stopwords(cfg, "en")?;
                    stop.extend(stopwords(cfg, language)?);
                    let series = load_series(cfg, std::slice::from_ref(country))?
                        .remove(country)
                        .unwrap();
                    let term = cfg.term(term)?;
                    let training = split_plan(&series, term.test_start, term.test_weeks)?.train;
                    let params = WtParams {
                        k: cfg.select_k,
                        max_candidates: cfg.select_max_candidates,
                        ..WtParams::default()
                    };
                    let trends = DirTrends::new(cfg.trends_dir(country)?);
                    wt_select(
                        &english,
                        source.as_ref().unwrap(),
                        &target,
                        &trends,
                        &series,
                        training,
                        &stop,
                        &params,
                    )
                    .with_context(|| format!("selecting queries for {country}"))?
                    .iter()
                    .map(Selection::from)
                    .collect()
                }
            }
        };
        let path = out.join(country).join("selected_queries.csv");
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        write_selected(&path, &rows)?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TrainMode {
    Single,
    Multi,
}

pub struct TrainFlags {
    pub mode: TrainMode,
    pub no_country_embedding: bool,
    pub no_queries: bool,
}

fn prepare_all(
    cfg: &ExperimentConfig,
    out: &Path,
    countries: &[String],
    term: Option<&str>,
    use_queries: bool,
) -> Result<Vec<Prepared>> {
    let term = cfg.term(term)?;
    let series = load_series(cfg, countries)?;
    countries
        .iter()
        .map(|c| {
            let queries = if use_queries {
                Queries::Fit(query_list(cfg, c, out)?)
            } else {
                Queries::None
            };
            prepare(cfg, &series[c], term, &queries)
                .with_context(|| format!("preparing {c} for term `{}`", term.name))
        })
        .collect()
}

fn save_fit(
    out: &Path,
    suffix: &str,
    seed: u64,
    prepared: &[&Prepared],
    result: &FitResult,
) -> Result<PathBuf> {
    let ckpt = Checkpoint {
        model: result.model.clone(),
        seed,
        countries: prepared
            .iter()
            .map(|p| (p.country.clone(), p.state.clone()))
            .collect(),
    };
    let path = out.join(format!("checkpoint{suffix}.json"));
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    ckpt.save(&path)?;
    // Reload check: the written file must reproduce the model exactly.
    ensure!(
        Checkpoint::load(&path)? == ckpt,
        "{} does not reload identically",
        path.display()
    );
    write_file(
        &out.join(format!("trainlog{suffix}.csv")),
        &result.log.to_csv(),
    )?;
    write_file(
        &out.join(format!("grid{suffix}.csv")),
        &grid_csv(&result.grid),
    )?;
    let best = result.log.best();
    println!(
        "{}: lr={} M={} best epoch {} val_mse {} ({} epochs, {:.1}s) -> {}",
        result.log.countries.join(","),
        result.log.lr,
        result.log.hidden,
        result.log.chosen_epoch,
        best.map_or(f64::NAN, |e| e.mean_val()),
        result.log.epochs.len(),
        result.log.wall_time_secs,
        path.display()
    );
    Ok(path)
}

pub fn train(
    cfg: &ExperimentConfig,
    out: &Path,
    countries: &[String],
    term: Option<&str>,
    flags: &TrainFlags,
) -> Result<Vec<PathBuf>> {
    let mut tcfg: TrainConfig = cfg.train.clone();
    if flags.no_country_embedding {
        tcfg.country_embedding = false;
    }
    if flags.no_queries {
        tcfg.use_queries = false;
    }
    let prepared = prepare_all(cfg, out, countries, term, tcfg.use_queries)?;
    let mut written = Vec::new();
    match flags.mode {
        TrainMode::Single => {
            for p in &prepared {
                let mut c = tcfg.clone();
                c.roster = vec![p.country.clone()];
                c.seed = derive_seed(cfg.seed, &format!("train.single.{}", p.country));
                let result = fit(&c, &[p.country_data()], Mode::Single)
                    .with_context(|| format!("training {}", p.country))?;
                written.push(save_fit(
                    out,
                    &format!("_{}", p.country),
                    cfg.seed,
                    &[p],
                    &result,
                )?);
            }
        }
        TrainMode::Multi => {
            let mut c = tcfg.clone();
            c.roster = countries.to_vec();
            c.seed = derive_seed(cfg.seed, "train.multi");
            let data: Vec<_> = prepared.iter().map(Prepared::country_data).collect();
            let result = fit(&c, &data, Mode::Multi).context("multi-task training")?;
            let refs: Vec<&Prepared> = prepared.iter().collect();
            written.push(save_fit(out, "", cfg.seed, &refs, &result)?);
        }
    }
    Ok(written)
}

/// Table name of a trained network.
pub fn model_name(model: &ModelParams) -> String {
    let c = &model.config;
    let mut name = if c.roster.len() > 1 {
        format!("Proposed_multi{}", c.roster.len())
    } else {
        "Proposed_single".to_string()
    };
    if c.query_mode == QueryMode::None {
        name.push_str("_wo_sq");
    }
    if c.roster.len() > 1 && !c.country_embedding {
        name.push_str("_wo_ce");
    }
    name
}

fn checkpoint_countries(ckpt: &Checkpoint, flag: Option<&[String]>) -> Result<Vec<String>> {
    let roster = &ckpt.model.config.roster;
    match flag {
        Some(c) if !c.is_empty() => {
            if let Some(bad) = c.iter().find(|c| !ckpt.countries.contains_key(*c)) {
                bail!(
                    "checkpoint has no country `{bad}` (it covers {})",
                    roster.join(", ")
                );
            }
            Ok(c.to_vec())
        }
        _ => Ok(roster.clone()),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    ensure!(
        path.is_file(),
        "checkpoint {} does not exist",
        path.display()
    );
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

/// Weights at every (country, week) must form a distribution.
fn check_attention(rows: &[AttentionRow]) -> Result<()> {
    let mut sums: BTreeMap<(&str, &str, IsoWeek), f64> = BTreeMap::new();
    for r in rows {
        ensure!(
            r.weight >= 0.0,
            "negative attention weight at {} {}",
            r.country,
            r.iso_week
        );
        *sums
            .entry((r.model.as_str(), r.country.as_str(), r.iso_week))
            .or_default() += r.weight;
    }
    for ((_, country, week), s) in sums {
        ensure!(
            (s - 1.0).abs() <= 1e-9,
            "attention at {country} {week} sums to {s}"
        );
    }
    Ok(())
}

pub struct EvalFlags<'a> {
    pub with_baselines: bool,
    pub name: Option<&'a str>,
}

pub fn evaluate_cmd(
    cfg: &ExperimentConfig,
    out: &Path,
    checkpoint: &Path,
    countries: Option<&[String]>,
    term: Option<&str>,
    flags: &EvalFlags,
) -> Result<EvalReport> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = &ckpt.model;
    let mut cfg = cfg.clone();
    cfg.input_weeks = model.config.input_weeks;
    cfg.horizon = model.config.horizon;
    let term = cfg.term(term)?.clone();
    let countries = checkpoint_countries(&ckpt, countries)?;
    let series = load_series(&cfg, &countries)?;
    let name = flags.name.map_or_else(|| model_name(model), String::from);
    let s = cfg.horizon;

    let mut report = EvalReport::default();
    let mut baselines = EvalReport::default();
    for country in &countries {
        let state = ckpt.country(country)?;
        let p = prepare(&cfg, &series[country], &term, &Queries::Stored(state))
            .with_context(|| format!("preparing {country} for term `{}`", term.name))?;
        let net = NetForecaster {
            name: name.clone(),
            model,
        };
        report.merge(evaluate(&net, &term.name, &p.test, s, &state.queries)?);

        if flags.with_baselines {
            baselines.merge(evaluate(&SeasonalNaive, &term.name, &p.test, s, &[])?);
            let ar = fit_ar_exog(&p.train, cfg.ar_order)
                .with_context(|| format!("fitting AR for {country}"))?;
            baselines.merge(evaluate(&ar, &term.name, &p.test, s, &[])?);

            let mut g = cfg.train.clone();
            g.plain_gru = true;
            g.use_queries = !state.queries.is_empty();
            g.roster = vec![country.clone()];
            g.seed = derive_seed(cfg.seed, &format!("baseline.gru.{country}"));
            let gru = fit(&g, &[p.country_data()], Mode::Single)
                .with_context(|| format!("training GRU for {country}"))?;
            let net = NetForecaster {
                name: "GRU".into(),
                model: &gru.model,
            };
            baselines.merge(evaluate(&net, &term.name, &p.test, s, &[])?);
        }
    }
    check_attention(&report.attention)?;

    write_file(&out.join("forecasts.csv"), &forecasts_csv(&report.traces))?;
    let with_attention: Vec<&String> = countries
        .iter()
        .filter(|c| report.attention.iter().any(|r| &r.country == *c))
        .collect();
    for c in &with_attention {
        let rows = report.attention.iter().filter(|r| &r.country == *c);
        write_file(
            &out.join(format!("attention_{c}.csv")),
            &attention_csv(rows),
        )?;
    }
    if let [only] = with_attention.as_slice() {
        let rows = report.attention.iter().filter(|r| &r.country == *only);
        write_file(&out.join("attention.csv"), &attention_csv(rows))?;
    }
    let mut models: Vec<&str> = baselines.metrics.iter().map(|m| m.model.as_str()).collect();
    models.dedup();
    for m in models {
        let rows = baselines.traces.iter().filter(|t| t.model == m);
        write_file(
            &out.join(format!("forecasts_{m}.csv")),
            &forecasts_csv(rows),
        )?;
    }
    report.merge(baselines);
    write_file(&out.join("report.csv"), &report_csv(&report.metrics))?;
    let table = render_table(&report);
    write_file(&out.join("table.txt"), &table)?;
    print!("{table}");
    Ok(report)
}

pub fn forecast_cmd(
    cfg: &ExperimentConfig,
    out: &Path,
    checkpoint: &Path,
    countries: Option<&[String]>,
    origin: Option<IsoWeek>,
) -> Result<PathBuf> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = &ckpt.model;
    let (n, s) = (model.config.input_weeks, model.config.horizon);
    let countries = checkpoint_countries(&ckpt, countries)?;
    let series = load_series(cfg, &countries)?;
    let mut text = String::from("iso_week,country,horizon,y_true,y_pred\n");
    for country in &countries {
        let state = ckpt.country(country)?;
        let sr = &series[country];
        let origin = origin.unwrap_or_else(|| sr.end());
        let w = forecast_window(cfg, sr, state, n, s, origin)?;
        let r = forecast(model, &w)?;
        for (h, (week, (y, yp))) in w
            .target_weeks()
            .zip(w.target.iter().zip(&r.forecast))
            .enumerate()
        {
            let _ = writeln!(text, "{week},{country},{},{},{yp:?}", h + 1, opt(*y));
        }
        if let Some(a) = &r.attention {
            let top = state
                .queries
                .iter()
                .zip(a)
                .max_by(|x, y| x.1.total_cmp(y.1))
                .map(|(q, w)| format!(", top query `{q}` ({w:.3})"))
                .unwrap_or_default();
            println!("{country}: forecast from {origin}{top}");
        } else {
            println!("{country}: forecast from {origin}");
        }
    }
    let path = out.join("forecast.csv");
    write_file(&path, &text)?;
    Ok(path)
}

pub fn correlate(
    cfg: &ExperimentConfig,
    out: &Path,
    countries: &[String],
    shifts: Option<&str>,
) -> Result<PathBuf> {
    let series = load_series(cfg, countries)?;
    let mut shifts = parse_shifts(shifts.unwrap_or(&cfg.shifts))?;
    shifts.retain(|c, _| series.contains_key(c));
    let ordered: Vec<_> = countries.iter().map(|c| series[c].clone()).collect();
    let report = correlation_report(&ordered, &shifts, None)?;
    let path = out.join("correlation.csv");
    let csv = report.to_csv();
    write_file(&path, &csv)?;
    print!("{csv}");
    Ok(path)
}
