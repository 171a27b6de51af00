use serde::{Deserialize, Serialize};

use super::calendar::{IsoWeek, WeekRange};
use super::series::WeeklySeries;
use super::trends::QueryPanel;
use crate::decompose::Decomposition;
use crate::error::{Error, Result};
use crate::numkit::Tensor2;

/// Weeks reserved for validation directly before the test period.
pub const VALIDATION_WEEKS: usize = 52;
/// Minimum training history.
pub const MIN_TRAINING_WEEKS: usize = 156;

/// One supervised example: `N` input weeks ending at `origin`, `S` target weeks after it.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub country: String,
    /// Last input week (`t`).
    pub origin: IsoWeek,
    /// Raw ILI over the input weeks.
    pub input: Vec<f64>,
    /// Deseasonalized ILI over the input weeks.
    pub input_deseason: Vec<f64>,
    /// Normalized query values, `N × L`.
    pub queries: Tensor2,
    /// Raw ILI over the target weeks (`Y`).
    pub target: Vec<f64>,
    /// Deseasonalized targets (`O = Y − Xˢ`).
    pub target_deseason: Vec<f64>,
    /// Seasonal values for the target weeks (`Xˢ`).
    pub seasonal: Vec<f64>,
    /// Query values for the first target week, when the panel covers it.
    pub next_queries: Option<Vec<f64>>,
}

impl WindowSample {
    pub fn n(&self) -> usize {
        self.input.len()
    }

    pub fn s(&self) -> usize {
        self.target.len()
    }

    pub fn num_queries(&self) -> usize {
        self.queries.cols()
    }

    pub fn target_weeks(&self) -> impl Iterator<Item = IsoWeek> + '_ {
        (1..=self.s() as i64).map(|k| self.origin.offset(k))
    }
}

/// Every window whose input and target weeks all lie inside `range`, stride 1.
/// `decomposition` must start at the first week of `series`; targets beyond
/// its fitted region use the periodic extension.
pub fn make_windows(
    series: &WeeklySeries,
    panel: Option<&QueryPanel>,
    decomposition: &Decomposition,
    n: usize,
    s: usize,
    range: WeekRange,
) -> Result<Vec<WindowSample>> {
    if n == 0 || s == 0 {
        return Err(Error::Param("window sizes N and S must be ≥ 1".into()));
    }
    if range.len < n + s {
        return Err(Error::InsufficientData {
            what: format!("{}: windows with N={n}, S={s}", series.country()),
            required: n + s,
            available: range.len,
        });
    }
    if decomposition.start != series.start() {
        return Err(Error::Alignment(format!(
            "decomposition starts at {}, series at {}",
            decomposition.start,
            series.start()
        )));
    }
    let values = series.slice(range)?;
    let first = series
        .index_of(range.start)
        .expect("range checked by slice");
    let seasonal = decomposition.seasonal_over(range.start, range.len)?;

    let panel_offset = match panel {
        Some(p) => {
            let off = p.index_of(range.start);
            let end_ok = p.index_of(range.end()).is_some();
            match off {
                Some(o) if end_ok => Some(o),
                _ => {
                    return Err(Error::Alignment(format!(
                        "{}: query panel does not cover {}..{}",
                        series.country(),
                        range.start,
                        range.end()
                    )))
                }
            }
        }
        None => None,
    };
    let l = panel.map_or(0, QueryPanel::num_queries);

    let count = range.len - n - s + 1;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let inp = k..k + n;
        let tgt = k + n..k + n + s;
        let input = values[inp.clone()].to_vec();
        let input_deseason = inp.clone().map(|i| values[i] - seasonal[i]).collect();
        let target = values[tgt.clone()].to_vec();
        let season: Vec<f64> = seasonal[tgt.clone()].to_vec();
        let target_deseason = tgt.clone().map(|i| values[i] - seasonal[i]).collect();

        let mut q = Vec::with_capacity(n * l);
        let mut next_queries = None;
        if let (Some(p), Some(off)) = (panel, panel_offset) {
            for i in inp.clone() {
                q.extend_from_slice(p.row(off + i));
            }
            next_queries = Some(p.row(off + tgt.start).to_vec());
        }
        out.push(WindowSample {
            country: series.country().to_string(),
            origin: series.start().offset((first + inp.end - 1) as i64),
            input,
            input_deseason,
            queries: Tensor2::from_raw(n, l, q),
            target,
            target_deseason,
            seasonal: season,
            next_queries,
        });
    }
    Ok(out)
}

/// Training, validation and test week ranges, in that order and disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: WeekRange,
    pub validation: WeekRange,
    pub test: WeekRange,
}

impl SplitPlan {
    /// Range for windows whose targets fall in `target` and whose inputs may
    /// reach back `n` weeks (clipped at `earliest`).
    pub fn eval_range(target: WeekRange, n: usize, earliest: IsoWeek) -> WeekRange {
        let mut start = target.start.offset(-(n as i64));
        if start < earliest {
            start = earliest;
        }
        WeekRange::between(start, target.end())
    }
}

/// Validation is the 52 weeks before `test_start`; training is everything
/// before that and must span at least 156 weeks.
pub fn split_plan(
    series: &WeeklySeries,
    test_start: IsoWeek,
    test_len: usize,
) -> Result<SplitPlan> {
    let test = WeekRange::new(test_start, test_len);
    if test_len == 0
        || series.index_of(test.start).is_none()
        || series.index_of(test.end()).is_none()
    {
        return Err(Error::InsufficientData {
            what: format!(
                "{}: test period {}..{} inside series {}..{}",
                series.country(),
                test.start,
                test.end(),
                series.start(),
                series.end()
            ),
            required: test_len.max(1),
            available: series.end().weeks_since(test_start).max(-1) as usize + 1,
        });
    }
    let validation = WeekRange::new(
        test_start.offset(-(VALIDATION_WEEKS as i64)),
        VALIDATION_WEEKS,
    );
    let history = test_start.weeks_since(series.start()).max(0) as usize;
    let required = MIN_TRAINING_WEEKS + VALIDATION_WEEKS;
    if history < required {
        return Err(Error::InsufficientData {
            what: format!(
                "{}: training + validation weeks before {test_start}",
                series.country()
            ),
            required,
            available: history,
        });
    }
    let train = WeekRange::between(series.start(), validation.start.offset(-1));
    Ok(SplitPlan {
        train,
        validation,
        test,
    })
}
