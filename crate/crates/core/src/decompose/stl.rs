use super::loess::{estimate, smooth, Degree};
use crate::error::{Error, Result};

/// STL smoother settings. Spans are counted in points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StlParams {
    pub period: usize,
    pub seasonal_span: usize,
    pub trend_span: usize,
    pub lowpass_span: usize,
    pub inner_iters: usize,
    pub outer_iters: usize,
}

fn next_odd(x: f64) -> usize {
    let n = x.ceil() as usize;
    if n.is_multiple_of(2) {
        n + 1
    } else {
        n
    }
}

impl StlParams {
    /// Cleveland's defaults for a given period: seasonal span 7, trend span
    /// the next odd integer ≥ 1.5·T/(1 − 1.5/7), low-pass span the next odd
    /// integer ≥ T, two inner passes and one robustness pass.
    pub fn for_period(period: usize) -> Self {
        let seasonal_span = 7;
        let trend_span = next_odd(1.5 * period as f64 / (1.0 - 1.5 / seasonal_span as f64));
        Self {
            period,
            seasonal_span,
            trend_span: trend_span.max(3),
            lowpass_span: next_odd(period as f64).max(3),
            inner_iters: 2,
            outer_iters: 1,
        }
    }

    pub fn with_iters(mut self, inner: usize, outer: usize) -> Self {
        self.inner_iters = inner;
        self.outer_iters = outer;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.period < 2 {
            return Err(Error::Param(format!(
                "STL period must be ≥ 2, got {}",
                self.period
            )));
        }
        for (name, span) in [
            ("seasonal", self.seasonal_span),
            ("trend", self.trend_span),
            ("low-pass", self.lowpass_span),
        ] {
            if span < 3 || span % 2 == 0 {
                return Err(Error::Param(format!(
                    "{name} span must be odd and ≥ 3, got {span}"
                )));
            }
        }
        if self.inner_iters == 0 {
            return Err(Error::Param(
                "STL needs at least one inner iteration".into(),
            ));
        }
        Ok(())
    }
}

/// Trend, seasonal and remainder vectors of one fit.
#[derive(Debug, Clone)]
pub(crate) struct StlFit {
    pub trend: Vec<f64>,
    pub seasonal: Vec<f64>,
    pub remainder: Vec<f64>,
}

pub(crate) fn stl(y: &[f64], params: &StlParams) -> Result<StlFit> {
    params.validate()?;
    let n = y.len();
    let np = params.period;
    if n < 2 * np {
        return Err(Error::InsufficientData {
            what: format!("STL with period {np}"),
            required: 2 * np,
            available: n,
        });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("stl input"));
    }

    let mut trend = vec![0.0; n];
    let mut seasonal = vec![0.0; n];
    let mut robustness: Option<Vec<f64>> = None;

    for pass in 0..=params.outer_iters {
        let rw = robustness.as_deref();
        for _ in 0..params.inner_iters {
            let detrended: Vec<f64> = y.iter().zip(&trend).map(|(a, t)| a - t).collect();
            let cycle = cycle_subseries(&detrended, np, params.seasonal_span, rw);
            let low = low_pass(&cycle, np, params.lowpass_span);
            for i in 0..n {
                seasonal[i] = cycle[np + i] - low[i];
            }
            let deseasonal: Vec<f64> = y.iter().zip(&seasonal).map(|(a, s)| a - s).collect();
            trend = smooth(&deseasonal, params.trend_span, Degree::Linear, rw);
        }
        if pass == params.outer_iters {
            break;
        }
        let fit: Vec<f64> = trend.iter().zip(&seasonal).map(|(t, s)| t + s).collect();
        robustness = Some(robustness_weights(y, &fit));
    }

    let remainder = (0..n).map(|i| y[i] - trend[i] - seasonal[i]).collect();
    Ok(StlFit {
        trend,
        seasonal,
        remainder,
    })
}

/// Smooth each cycle-subseries and extend it one period on both sides.
/// Output length is `n + 2·period`.
fn cycle_subseries(y: &[f64], period: usize, span: usize, rw: Option<&[f64]>) -> Vec<f64> {
    let n = y.len();
    let mut out = vec![0.0; n + 2 * period];
    for phase in 0..period {
        let sub: Vec<f64> = y.iter().skip(phase).step_by(period).copied().collect();
        let sub_rw: Option<Vec<f64>> =
            rw.map(|w| w.iter().skip(phase).step_by(period).copied().collect());
        let k = sub.len();
        let smoothed = smooth(&sub, span, Degree::Constant, sub_rw.as_deref());

        let right = span.min(k) - 1;
        let before = estimate(
            &sub,
            span,
            Degree::Constant,
            -1.0,
            0,
            right,
            sub_rw.as_deref(),
        )
        .unwrap_or(smoothed[0]);
        let left = k.saturating_sub(span);
        let after = estimate(
            &sub,
            span,
            Degree::Constant,
            k as f64,
            left,
            k - 1,
            sub_rw.as_deref(),
        )
        .unwrap_or(smoothed[k - 1]);

        out[phase] = before;
        for (m, v) in smoothed.iter().enumerate() {
            out[(m + 1) * period + phase] = *v;
        }
        out[(k + 1) * period + phase] = after;
    }
    out
}

fn moving_average(y: &[f64], len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(y.len() + 1 - len);
    let mut sum: f64 = y[..len].iter().sum();
    out.push(sum / len as f64);
    for i in len..y.len() {
        sum += y[i] - y[i - len];
        out.push(sum / len as f64);
    }
    out
}

/// Moving averages of length T, T and 3, then a degree-1 LOESS pass.
fn low_pass(cycle: &[f64], period: usize, span: usize) -> Vec<f64> {
    let a = moving_average(cycle, period);
    let b = moving_average(&a, period);
    let c = moving_average(&b, 3);
    smooth(&c, span, Degree::Linear, None)
}

/// Bisquare weights on residuals scaled by six times their median.
fn robustness_weights(y: &[f64], fit: &[f64]) -> Vec<f64> {
    let r: Vec<f64> = y.iter().zip(fit).map(|(a, b)| (a - b).abs()).collect();
    let mut sorted = r.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n.is_multiple_of(2) {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    } else {
        sorted[n / 2]
    };
    let cmad = 6.0 * median;
    let (c1, c9) = (0.001 * cmad, 0.999 * cmad);
    r.iter()
        .map(|&ri| {
            if ri <= c1 {
                1.0
            } else if ri <= c9 {
                (1.0 - (ri / cmad).powi(2)).powi(2)
            } else {
                0.0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spans() {
        let p = StlParams::for_period(52);
        assert_eq!(p.seasonal_span, 7);
        assert_eq!(p.trend_span, 101);
        assert_eq!(p.lowpass_span, 53);
    }

    #[test]
    fn moving_average_lengths() {
        let y: Vec<f64> = (0..10).map(f64::from).collect();
        let m = moving_average(&y, 4);
        assert_eq!(m.len(), 7);
        assert_eq!(m[0], 1.5);
    }

    #[test]
    fn robustness_weights_zero_residuals() {
        let y = [1.0, 2.0, 3.0];
        assert_eq!(robustness_weights(&y, &y), vec![1.0; 3]);
    }

    #[test]
    fn robustness_weights_reject_outlier() {
        let y = [0.0, 0.1, -0.1, 0.05, -0.05, 10.0];
        let w = robustness_weights(&y, &[0.0; 6]);
        assert_eq!(w[5], 0.0);
        assert!(w[0] > 0.9);
    }

    #[test]
    fn too_short_series() {
        let y = vec![1.0; 100];
        assert!(matches!(
            stl(&y, &StlParams::for_period(52)),
            Err(Error::InsufficientData { required: 104, .. })
        ));
    }
}
