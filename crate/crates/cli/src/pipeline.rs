use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use flucast::datahub::{
    load_ili, load_trends, make_windows, minmax_fit_apply, read_query_list, split_plan, IsoWeek,
    QueryPanel, SplitPlan, WeeklySeries, WindowSample,
};
use flucast::decompose::{stl_decompose, StlParams, WEEKS_PER_YEAR};
use flucast::fluenet::CountryState;
use flucast::numkit::Tensor2;
use flucast::trainer::CountryData;

use crate::config::{ExperimentConfig, Term};

/// One country's data cut for a term.
pub struct Prepared {
    pub country: String,
    pub state: CountryState,
    pub train: Vec<WindowSample>,
    pub validation: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

impl Prepared {
    pub fn country_data(&self) -> CountryData {
        CountryData {
            country: self.country.clone(),
            train: self.train.clone(),
            validation: self.validation.clone(),
        }
    }
}

/// Where a country's query columns come from.
pub enum Queries<'a> {
    None,
    /// Fit the min-max scalers on this term's training weeks.
    Fit(Vec<String>),
    /// Reuse the scalers stored in a checkpoint.
    Stored(&'a CountryState),
}

pub fn load_series(
    cfg: &ExperimentConfig,
    countries: &[String],
) -> Result<BTreeMap<String, WeeklySeries>> {
    let path = cfg.ili_path()?;
    let mut all = load_ili(path).with_context(|| format!("loading {}", path.display()))?;
    countries
        .iter()
        .map(|c| {
            let s = all
                .remove(c)
                .with_context(|| format!("{} has no rows for country `{c}`", path.display()))?;
            Ok((c.clone(), s))
        })
        .collect()
}

pub fn stl_params() -> StlParams {
    StlParams::for_period(WEEKS_PER_YEAR)
}

/// Up to `L` queries from the country's list.
pub fn query_list(cfg: &ExperimentConfig, country: &str, out: &Path) -> Result<Vec<String>> {
    let path = cfg.query_list_path(country, out);
    let mut list = read_query_list(&path).with_context(|| {
        format!(
            "reading queries for {country} from {} (run select-queries or set queries.{country})",
            path.display()
        )
    })?;
    if list.is_empty() {
        bail!("{}: no queries listed", path.display());
    }
    if list.len() < cfg.num_queries {
        log::warn!(
            "{country}: {} lists {} queries, fewer than L={}",
            path.display(),
            list.len(),
            cfg.num_queries
        );
    }
    list.truncate(cfg.num_queries);
    Ok(list)
}

type ScaledPanel = (QueryPanel, Vec<String>, Vec<flucast::datahub::MinMax>);

fn scaled_panel(
    cfg: &ExperimentConfig,
    country: &str,
    series: &WeeklySeries,
    queries: &Queries,
    training: flucast::datahub::WeekRange,
) -> Result<Option<ScaledPanel>> {
    match queries {
        Queries::None => Ok(None),
        Queries::Fit(list) => {
            let raw = load_trends(cfg.trends_dir(country)?, list, series)?;
            let (panel, scales) = minmax_fit_apply(&raw, training)?;
            Ok(Some((panel, list.clone(), scales)))
        }
        Queries::Stored(state) => {
            if state.queries.is_empty() {
                return Ok(None);
            }
            let raw = load_trends(cfg.trends_dir(country)?, &state.queries, series)?;
            let l = state.queries.len();
            let values = (0..raw.num_weeks())
                .flat_map(|i| {
                    raw.row(i)
                        .iter()
                        .zip(&state.query_scales)
                        .map(|(v, s)| s.apply(*v))
                        .collect::<Vec<_>>()
                })
                .collect::<Vec<_>>();
            debug_assert_eq!(values.len(), raw.num_weeks() * l);
            let panel = QueryPanel::new(country, raw.start, state.queries.clone(), values)?;
            Ok(Some((
                panel,
                state.queries.clone(),
                state.query_scales.clone(),
            )))
        }
    }
}

/// Decompose the training weeks, scale queries, and cut train, validation
/// and test windows.
pub fn prepare(
    cfg: &ExperimentConfig,
    series: &WeeklySeries,
    term: &Term,
    queries: &Queries,
) -> Result<Prepared> {
    let country = series.country().to_string();
    let plan = split_plan(series, term.test_start, term.test_weeks)?;
    let decomposition = stl_decompose(&series.restrict(plan.train)?, &stl_params())?;
    if let Queries::Stored(state) = queries {
        let template = decomposition.template();
        if state.fit_end != plan.train.end() || template != state.template {
            log::warn!(
                "{country}: decomposition of term `{}` differs from the checkpoint's (fit end {} vs {})",
                term.name,
                plan.train.end(),
                state.fit_end
            );
        }
    }
    let panel = scaled_panel(cfg, &country, series, queries, plan.train)?;
    let (n, s) = (cfg.input_weeks, cfg.horizon);
    let p = panel.as_ref().map(|(p, _, _)| p);
    let earliest = series.start();
    let train = make_windows(series, p, &decomposition, n, s, plan.train)?;
    let validation = make_windows(
        series,
        p,
        &decomposition,
        n,
        s,
        SplitPlan::eval_range(plan.validation, n, earliest),
    )?;
    let test = make_windows(
        series,
        p,
        &decomposition,
        n,
        s,
        SplitPlan::eval_range(plan.test, n, earliest),
    )?;
    let (names, scales) = panel.map(|(_, n, s)| (n, s)).unwrap_or_default();
    let state = CountryState {
        template: decomposition.template(),
        queries: names,
        query_scales: scales,
        fit_end: plan.train.end(),
    };
    Ok(Prepared {
        country,
        state,
        train,
        validation,
        test,
    })
}

/// The window whose last input week is `origin`. Target weeks past the end
/// of the data get NaN truth values.
pub fn forecast_window(
    cfg: &ExperimentConfig,
    series: &WeeklySeries,
    state: &CountryState,
    n: usize,
    s: usize,
    origin: IsoWeek,
) -> Result<WindowSample> {
    let country = series.country();
    let first = origin.offset(-(n as i64 - 1));
    if series.index_of(first).is_none() || series.index_of(origin).is_none() {
        bail!(
            "{country}: data covers {}..{}, the {n} input weeks ending at {origin} are not all present",
            series.start(),
            series.end()
        );
    }
    let fit_range = flucast::datahub::WeekRange::between(series.start(), state.fit_end);
    let decomposition = stl_decompose(&series.restrict(fit_range)?, &stl_params())?;
    if decomposition.template() != state.template {
        log::warn!("{country}: refitted seasonal pattern differs from the checkpoint's");
    }
    let seasonal = decomposition.seasonal_over(first, n + s)?;
    let value = |w: IsoWeek| series.index_of(w).map_or(f64::NAN, |i| series.values()[i]);
    let input: Vec<f64> = (0..n as i64).map(|k| value(first.offset(k))).collect();
    let target: Vec<f64> = (1..=s as i64).map(|k| value(origin.offset(k))).collect();
    let panel = scaled_panel(cfg, country, series, &Queries::Stored(state), fit_range)?;
    let l = state.queries.len();
    let mut q = Vec::with_capacity(n * l);
    if let Some((p, _, _)) = &panel {
        let off = p
            .index_of(first)
            .context("query panel does not cover the input weeks")?;
        for i in 0..n {
            q.extend_from_slice(p.row(off + i));
        }
    }
    Ok(WindowSample {
        country: country.to_string(),
        origin,
        input_deseason: input.iter().zip(&seasonal).map(|(x, s)| x - s).collect(),
        input,
        queries: Tensor2::new(n, if panel.is_some() { l } else { 0 }, q)?,
        target_deseason: target
            .iter()
            .zip(&seasonal[n..])
            .map(|(x, s)| x - s)
            .collect(),
        target,
        seasonal: seasonal[n..].to_vec(),
        next_queries: None,
    })
}
