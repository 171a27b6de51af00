use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datahub::WindowSample;
use crate::error::{Error, Result};

/// Persistence on the deseasonalized component plus the seasonal values.
pub fn seasonal_naive(sample: &WindowSample) -> Vec<f64> {
    let last = sample.input_deseason.last().copied().unwrap_or(0.0);
    sample.seasonal.iter().map(|s| last + s).collect()
}

/// One-step linear model `y[t+1] ~ y[t], …, y[t−p+1], q[t+1, ·], 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArExogModel {
    pub p: usize,
    pub num_queries: usize,
    /// `p` lag coefficients (most recent first), then `L` query
    /// coefficients, then the intercept.
    pub coefficients: Vec<f64>,
}

const RIDGE_LAMBDA: f64 = 1e-6;

/// Regressor row of `w` for order `p`.
pub fn ar_design_row(w: &WindowSample, p: usize) -> Result<Vec<f64>> {
    let n = w.n();
    if p == 0 || p > n {
        return Err(Error::Param(format!("AR order {p} outside 1..={n}")));
    }
    let mut row: Vec<f64> = (0..p).map(|k| w.input[n - 1 - k]).collect();
    if w.num_queries() > 0 {
        let q = w.next_queries.as_ref().ok_or_else(|| {
            Error::Alignment(format!(
                "{} {}: no query values for the target week",
                w.country, w.origin
            ))
        })?;
        row.extend_from_slice(q);
    }
    row.push(1.0);
    Ok(row)
}

impl ArExogModel {
    pub fn predict(&self, w: &WindowSample) -> Result<f64> {
        if w.num_queries() != self.num_queries {
            return Err(Error::shape(
                "ar_exog",
                (1, w.num_queries()),
                (1, self.num_queries),
            ));
        }
        let row = ar_design_row(w, self.p)?;
        Ok(row.iter().zip(&self.coefficients).map(|(x, c)| x * c).sum())
    }
}

/// Least squares on raw ILI. `p` shrinks when there are fewer than
/// `p + L + 2` rows; a rank-deficient design falls back to ridge with λ = 1e-6.
pub fn fit_ar_exog(train: &[WindowSample], p: usize) -> Result<ArExogModel> {
    let first = train
        .first()
        .ok_or_else(|| Error::Contract("no AR training windows".into()))?;
    let l = first.num_queries();
    let rows = train.len();
    let mut p = p.min(first.n());
    if rows < p + l + 2 {
        let reduced = rows.saturating_sub(l + 2);
        if reduced == 0 {
            return Err(Error::InsufficientData {
                what: format!("{}: AR-exog training rows", first.country),
                required: l + 3,
                available: rows,
            });
        }
        log::warn!(
            "{}: AR order reduced from {p} to {reduced} ({rows} rows)",
            first.country
        );
        p = reduced;
    }
    let cols = p + l + 1;
    let mut x = DMatrix::<f64>::zeros(rows, cols);
    let mut y = DVector::<f64>::zeros(rows);
    for (i, w) in train.iter().enumerate() {
        if w.num_queries() != l {
            return Err(Error::shape("ar_exog rows", (1, w.num_queries()), (1, l)));
        }
        for (j, v) in ar_design_row(w, p)?.into_iter().enumerate() {
            x[(i, j)] = v;
        }
        y[i] = w.target[0];
    }

    let svd = x.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let tol = max_sv * f64::EPSILON * rows.max(cols) as f64;
    let beta = if svd.rank(tol) < cols {
        log::warn!(
            "{}: AR-exog design is rank deficient, using ridge λ={RIDGE_LAMBDA}",
            first.country
        );
        let xt = x.transpose();
        let gram = &xt * &x + DMatrix::<f64>::identity(cols, cols) * RIDGE_LAMBDA;
        gram.cholesky()
            .ok_or_else(|| Error::Degenerate("ridge system not positive definite".into()))?
            .solve(&(&xt * &y))
    } else {
        svd.solve(&y, tol)
            .map_err(|e| Error::Degenerate(e.to_string()))?
    };
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fit_ar_exog"));
    }
    Ok(ArExogModel {
        p,
        num_queries: l,
        coefficients: beta.iter().copied().collect(),
    })
}
