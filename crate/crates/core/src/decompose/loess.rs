//! Locally weighted regression with tricube weights, following Cleveland's
//! STL smoother (window of `span` nearest points, bandwidth widened when the
//! span exceeds the series length).

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Degree {
    Constant,
    Linear,
}

impl Degree {
    pub fn from_order(order: usize) -> Result<Self> {
        match order {
            0 => Ok(Degree::Constant),
            1 => Ok(Degree::Linear),
            d => Err(Error::Param(format!(
                "loess degree must be 0 or 1, got {d}"
            ))),
        }
    }

    fn order(self) -> usize {
        match self {
            Degree::Constant => 0,
            Degree::Linear => 1,
        }
    }
}

/// Estimate at position `xs` (may lie outside `0..n`) from the points
/// `left..=right`. Returns `None` when all weights vanish.
pub(crate) fn estimate(
    y: &[f64],
    span: usize,
    degree: Degree,
    xs: f64,
    left: usize,
    right: usize,
    robustness: Option<&[f64]>,
) -> Option<f64> {
    let n = y.len();
    let mut h = (xs - left as f64).max(right as f64 - xs);
    if span > n {
        h += ((span - n) / 2) as f64;
    }
    let upper = 0.999 * h;
    let lower = 0.001 * h;

    let mut w = vec![0.0; right - left + 1];
    let mut total = 0.0;
    for (k, j) in (left..=right).enumerate() {
        let r = (j as f64 - xs).abs();
        if r <= upper {
            let mut wj = if r <= lower {
                1.0
            } else {
                let q = r / h;
                (1.0 - q * q * q).powi(3)
            };
            if let Some(rw) = robustness {
                wj *= rw[j];
            }
            w[k] = wj;
            total += wj;
        }
    }
    if total <= 0.0 {
        return None;
    }
    for wj in w.iter_mut() {
        *wj /= total;
    }

    if degree == Degree::Linear && h > 0.0 {
        let center: f64 = (left..=right).zip(&w).map(|(j, wj)| wj * j as f64).sum();
        let spread: f64 = (left..=right)
            .zip(&w)
            .map(|(j, wj)| wj * (j as f64 - center).powi(2))
            .sum();
        if spread.sqrt() > 0.001 * (n as f64 - 1.0) {
            let slope = (xs - center) / spread;
            for (j, wj) in (left..=right).zip(w.iter_mut()) {
                *wj *= slope * (j as f64 - center) + 1.0;
            }
        }
    }
    Some((left..=right).zip(&w).map(|(j, wj)| wj * y[j]).sum())
}

/// Smooth every point of `y`. Points whose weights all vanish keep their
/// input value.
pub(crate) fn smooth(
    y: &[f64],
    span: usize,
    degree: Degree,
    robustness: Option<&[f64]>,
) -> Vec<f64> {
    let n = y.len();
    if n < 2 {
        return y.to_vec();
    }
    let mut out = vec![0.0; n];
    if span >= n {
        for (i, o) in out.iter_mut().enumerate() {
            *o = estimate(y, span, degree, i as f64, 0, n - 1, robustness).unwrap_or(y[i]);
        }
        return out;
    }
    let half = span.div_ceil(2);
    let (mut left, mut right) = (0, span - 1);
    for (i, o) in out.iter_mut().enumerate() {
        if i + 1 > half && right != n - 1 {
            left += 1;
            right += 1;
        }
        *o = estimate(y, span, degree, i as f64, left, right, robustness).unwrap_or(y[i]);
    }
    out
}

/// LOESS smoother over an evenly spaced series.
///
/// `span` must be odd and at least `degree + 1`; a span longer than the
/// series is clamped to the largest odd value that fits. Optional robustness
/// weights multiply the tricube weights.
pub fn loess_smooth(
    series: &[f64],
    span: usize,
    degree: usize,
    robustness_weights: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let degree = Degree::from_order(degree)?;
    if span.is_multiple_of(2) {
        return Err(Error::Param(format!("loess span must be odd, got {span}")));
    }
    if span < degree.order() + 1 {
        return Err(Error::Param(format!(
            "loess span {span} too small for degree {}",
            degree.order()
        )));
    }
    if series.len() < 2 {
        return Err(Error::InsufficientData {
            what: "loess_smooth".into(),
            required: 2,
            available: series.len(),
        });
    }
    if let Some(rw) = robustness_weights {
        if rw.len() != series.len() {
            return Err(Error::shape(
                "loess_smooth",
                (series.len(), 1),
                (rw.len(), 1),
            ));
        }
    }
    let n = series.len();
    let span = if span > n {
        if n % 2 == 1 {
            n
        } else {
            n - 1
        }
    } else {
        span
    };
    Ok(smooth(series, span, degree, robustness_weights))
}
