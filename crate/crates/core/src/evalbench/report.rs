use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::baselines::{seasonal_naive, ArExogModel};
use super::metrics::{r2, rmse};
use crate::datahub::{IsoWeek, WindowSample};
use crate::error::{Error, Result};
use crate::fluenet::{forecast_batch, ModelParams};

/// One model's output for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Forecasts for horizons `1..=values.len()`.
    pub values: Vec<f64>,
    pub attention: Option<Vec<f64>>,
}

/// Anything that can forecast windows of one country.
pub trait Forecaster {
    fn name(&self) -> &str;
    /// Largest horizon this model forecasts.
    fn max_horizon(&self) -> usize;
    fn predict(&self, windows: &[&WindowSample]) -> Result<Vec<Prediction>>;
}

/// A trained network (the proposed model or the plain GRU baseline).
pub struct NetForecaster<'a> {
    pub name: String,
    pub model: &'a ModelParams,
}

impl Forecaster for NetForecaster<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn max_horizon(&self) -> usize {
        self.model.config.horizon
    }

    fn predict(&self, windows: &[&WindowSample]) -> Result<Vec<Prediction>> {
        Ok(forecast_batch(self.model, windows)?
            .into_iter()
            .map(|r| Prediction {
                values: r.forecast,
                attention: r.attention,
            })
            .collect())
    }
}

pub struct SeasonalNaive;

impl Forecaster for SeasonalNaive {
    fn name(&self) -> &str {
        "SeasonalNaive"
    }

    fn max_horizon(&self) -> usize {
        usize::MAX
    }

    fn predict(&self, windows: &[&WindowSample]) -> Result<Vec<Prediction>> {
        Ok(windows
            .iter()
            .map(|w| Prediction {
                values: seasonal_naive(w),
                attention: None,
            })
            .collect())
    }
}

impl Forecaster for ArExogModel {
    fn name(&self) -> &str {
        "AR"
    }

    fn max_horizon(&self) -> usize {
        1
    }

    fn predict(&self, windows: &[&WindowSample]) -> Result<Vec<Prediction>> {
        windows
            .iter()
            .map(|w| {
                Ok(Prediction {
                    values: vec![self.predict(w)?],
                    attention: None,
                })
            })
            .collect()
    }
}

/// Metrics of one (model, country, term, horizon) cell; absent when the model
/// does not forecast that far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub country: String,
    pub term: String,
    pub horizon: usize,
    pub rmse: Option<f64>,
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub model: String,
    pub country: String,
    pub term: String,
    /// Week being forecast.
    pub iso_week: IsoWeek,
    pub horizon: usize,
    pub y_true: f64,
    pub y_pred: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub model: String,
    pub country: String,
    pub term: String,
    /// Last input week of the window the weights were computed for.
    pub iso_week: IsoWeek,
    pub query: String,
    pub weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Vec<MetricRow>,
    pub traces: Vec<TraceRow>,
    pub attention: Vec<AttentionRow>,
}

impl EvalReport {
    pub fn merge(&mut self, other: EvalReport) {
        self.metrics.extend(other.metrics);
        self.traces.extend(other.traces);
        self.attention.extend(other.attention);
    }

    pub fn metric(
        &self,
        model: &str,
        country: &str,
        term: &str,
        horizon: usize,
    ) -> Option<&MetricRow> {
        self.metrics.iter().find(|m| {
            m.model == model && m.country == country && m.term == term && m.horizon == horizon
        })
    }
}

/// Score `model` on `windows` of one country for horizons `1..=horizon`.
/// `queries` names the attention columns.
pub fn evaluate(
    model: &dyn Forecaster,
    term: &str,
    windows: &[WindowSample],
    horizon: usize,
    queries: &[String],
) -> Result<EvalReport> {
    let first = windows
        .first()
        .ok_or_else(|| Error::Contract("no test windows".into()))?;
    let country = first.country.clone();
    if let Some(w) = windows.iter().find(|w| w.country != country) {
        return Err(Error::Contract(format!(
            "test windows mix {country} and {}",
            w.country
        )));
    }
    if let Some(w) = windows.iter().find(|w| w.s() < horizon) {
        return Err(Error::shape(
            "test window horizon",
            (1, w.s()),
            (1, horizon),
        ));
    }
    let refs: Vec<&WindowSample> = windows.iter().collect();
    let preds = model.predict(&refs)?;
    let name = model.name().to_string();
    let mut report = EvalReport::default();

    for h in 1..=horizon {
        let mut row = MetricRow {
            model: name.clone(),
            country: country.clone(),
            term: term.to_string(),
            horizon: h,
            rmse: None,
            r2: None,
        };
        if h <= model.max_horizon() {
            let y: Vec<f64> = windows.iter().map(|w| w.target[h - 1]).collect();
            let y_hat: Vec<f64> = preds.iter().map(|p| p.values[h - 1]).collect();
            row.rmse = Some(rmse(&y, &y_hat)?);
            row.r2 = match r2(&y, &y_hat) {
                Ok(v) => Some(v),
                Err(Error::Degenerate(msg)) | Err(Error::InsufficientData { what: msg, .. }) => {
                    log::warn!("{name} {country} {term} h{h}: R² undefined ({msg})");
                    None
                }
                Err(e) => return Err(e),
            };
            for (w, (yt, yp)) in windows.iter().zip(y.iter().zip(&y_hat)) {
                report.traces.push(TraceRow {
                    model: name.clone(),
                    country: country.clone(),
                    term: term.to_string(),
                    iso_week: w.origin.offset(h as i64),
                    horizon: h,
                    y_true: *yt,
                    y_pred: *yp,
                });
            }
        }
        report.metrics.push(row);
    }

    for (w, p) in windows.iter().zip(&preds) {
        if let Some(weights) = &p.attention {
            if weights.len() != queries.len() {
                return Err(Error::shape(
                    "attention names",
                    (1, weights.len()),
                    (1, queries.len()),
                ));
            }
            for (q, a) in queries.iter().zip(weights) {
                report.attention.push(AttentionRow {
                    model: name.clone(),
                    country: country.clone(),
                    term: term.to_string(),
                    iso_week: w.origin,
                    query: q.clone(),
                    weight: *a,
                });
            }
        }
    }
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `model,country,term,horizon,rmse,r2`; absent metrics are empty fields.
pub fn report_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("model,country,term,horizon,rmse,r2\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.model,
            r.country,
            r.term,
            r.horizon,
            opt(r.rmse),
            opt(r.r2)
        );
    }
    s
}

pub fn forecasts_csv<'a>(rows: impl IntoIterator<Item = &'a TraceRow>) -> String {
    let mut s = String::from("iso_week,country,horizon,y_true,y_pred\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:?},{:?}",
            r.iso_week, r.country, r.horizon, r.y_true, r.y_pred
        );
    }
    s
}

pub fn attention_csv<'a>(rows: impl IntoIterator<Item = &'a AttentionRow>) -> String {
    let mut s = String::from("iso_week,query,weight\n");
    for r in rows {
        let q = if r.query.contains([',', '"']) {
            format!("\"{}\"", r.query.replace('"', "\"\""))
        } else {
            r.query.clone()
        };
        let _ = writeln!(s, "{},{q},{:?}", r.iso_week, r.weight);
    }
    s
}

pub fn write_report(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    write_text(path.as_ref(), &report_csv(rows))
}

pub fn write_forecasts<'a>(
    path: impl AsRef<Path>,
    rows: impl IntoIterator<Item = &'a TraceRow>,
) -> Result<()> {
    write_text(path.as_ref(), &forecasts_csv(rows))
}

pub fn write_attention<'a>(
    path: impl AsRef<Path>,
    rows: impl IntoIterator<Item = &'a AttentionRow>,
) -> Result<()> {
    write_text(path.as_ref(), &attention_csv(rows))
}

/// Text table per (country, term): one line per model with RMSE and R² for
/// each horizon; `---` where a model gives no forecast.
pub fn render_table(report: &EvalReport) -> String {
    let mut cells: Vec<(&str, &str)> = report
        .metrics
        .iter()
        .map(|m| (m.country.as_str(), m.term.as_str()))
        .collect();
    cells.dedup();
    let mut seen = std::collections::HashSet::new();
    cells.retain(|c| seen.insert(*c));
    let mut out = String::new();
    for (country, term) in cells {
        let rows: Vec<&MetricRow> = report
            .metrics
            .iter()
            .filter(|m| m.country == country && m.term == term)
            .collect();
        let horizons = rows.iter().map(|r| r.horizon).max().unwrap_or(0);
        let mut models: Vec<&str> = Vec::new();
        for r in &rows {
            if !models.contains(&r.model.as_str()) {
                models.push(&r.model);
            }
        }
        let _ = writeln!(out, "{country} {term}");
        let _ = write!(out, "{:<16}", "model");
        for h in 1..=horizons {
            let _ = write!(out, " {:>8}", format!("RMSE h{h}"));
        }
        for h in 1..=horizons {
            let _ = write!(out, " {:>8}", format!("R2 h{h}"));
        }
        out.push('\n');
        for m in models {
            let _ = write!(out, "{m:<16}");
            let get = |h: usize| rows.iter().find(|r| r.model == m && r.horizon == h);
            for h in 1..=horizons {
                let cell = get(h)
                    .and_then(|r| r.rmse)
                    .map_or("---".to_string(), |v| format!("{v:.3}"));
                let _ = write!(out, " {cell:>8}");
            }
            for h in 1..=horizons {
                let cell = get(h)
                    .and_then(|r| r.r2)
                    .map_or("---".to_string(), |v| format!("{v:.3}"));
                let _ = write!(out, " {cell:>8}");
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalbench::fit_ar_exog;
    use crate::fluenet::ModelConfig;
    use crate::numkit::Rng;

    fn windows(count: usize, s: usize, l: usize, rng: &mut Rng) -> Vec<WindowSample> {
        (0..count)
            .map(|k| {
                let input: Vec<f64> = (0..6).map(|_| rng.uniform(1.0, 3.0)).collect();
                let target: Vec<f64> = (0..s).map(|_| rng.uniform(1.0, 3.0)).collect();
                let seasonal: Vec<f64> = (0..s).map(|_| rng.uniform(-0.3, 0.3)).collect();
                WindowSample {
                    country: "JP".into(),
                    origin: IsoWeek::EPOCH.offset(k as i64 + 5),
                    input_deseason: input.iter().map(|v| v - 0.1).collect(),
                    input,
                    queries: rng.uniform_tensor(6, l, 0.0, 1.0),
                    target_deseason: target.iter().zip(&seasonal).map(|(a, b)| a - b).collect(),
                    target,
                    seasonal,
                    next_queries: Some((0..l).map(|_| rng.uniform(0.0, 1.0)).collect()),
                }
            })
            .collect()
    }

    #[test]
    fn network_report_shape() {
        let mut rng = Rng::new(1);
        let ws = windows(12, 5, 2, &mut rng);
        let model =
            ModelParams::init(ModelConfig::new(4, 6, 5, 2, vec!["JP".into()]), &mut rng).unwrap();
        let net = NetForecaster {
            name: "Proposed".into(),
            model: &model,
        };
        let q = vec!["a".to_string(), "b".to_string()];
        let r = evaluate(&net, "2017", &ws, 5, &q).unwrap();
        assert_eq!(r.metrics.len(), 5);
        assert!(r
            .metrics
            .iter()
            .all(|m| m.rmse.unwrap() >= 0.0 && m.r2.unwrap() <= 1.0));
        assert_eq!(r.traces.len(), 12 * 5);
        assert_eq!(r.attention.len(), 12 * 2);
        for pair in r.attention.chunks(2) {
            assert!((pair[0].weight + pair[1].weight - 1.0).abs() < 1e-9);
        }
        let csv = attention_csv(&r.attention);
        assert!(csv.starts_with("iso_week,query,weight\n"));
    }

    #[test]
    fn ar_horizons_beyond_one_absent() {
        let mut rng = Rng::new(2);
        let ws = windows(30, 5, 1, &mut rng);
        let ar = fit_ar_exog(&ws, 2).unwrap();
        let r = evaluate(&ar, "2017", &ws, 5, &[]).unwrap();
        assert!(r.metrics[0].rmse.is_some());
        assert!(r.metrics[1..]
            .iter()
            .all(|m| m.rmse.is_none() && m.r2.is_none()));
        let csv = report_csv(&r.metrics);
        assert!(csv.contains("AR,JP,2017,2,,\n"));
        assert!(render_table(&r).contains("---"));
    }

    #[test]
    fn naive_horizon_one_is_persistence() {
        let mut rng = Rng::new(3);
        let ws = windows(10, 3, 0, &mut rng);
        let r = evaluate(&SeasonalNaive, "t", &ws, 3, &[]).unwrap();
        let y: Vec<f64> = ws.iter().map(|w| w.target[0]).collect();
        let p: Vec<f64> = ws
            .iter()
            .map(|w| w.input_deseason[5] + w.seasonal[0])
            .collect();
        assert_eq!(r.metrics[0].rmse, Some(rmse(&y, &p).unwrap()));
    }

    #[test]
    fn report_csv_layout() {
        let rows = [MetricRow {
            model: "AR".into(),
            country: "US".into(),
            term: "2017".into(),
            horizon: 2,
            rmse: None,
            r2: None,
        }];
        assert_eq!(
            report_csv(&rows),
            "model,country,term,horizon,rmse,r2\nAR,US,2017,2,,\n"
        );
    }
}
