//! Seasonal-trend decomposition (STL) of weekly ILI series and periodic
//! extension of the seasonal pattern past the fitted region.

mod loess;
mod stl;

pub use loess::{loess_smooth, Degree};
pub use stl::StlParams;

use serde::{Deserialize, Serialize};

use crate::datahub::{IsoWeek, WeeklySeries};
use crate::error::{Error, Result};

/// Weeks per seasonal cycle once ISO week 53 is dropped.
pub const WEEKS_PER_YEAR: usize = 52;

/// `observed = trend + seasonal + remainder` over consecutive weeks from `start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub start: IsoWeek,
    pub period: usize,
    pub trend: Vec<f64>,
    pub seasonal: Vec<f64>,
    pub remainder: Vec<f64>,
}

/// One period of the seasonal component; `values[0]` belongs to `anchor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeasonalTemplate {
    pub anchor: IsoWeek,
    pub values: Vec<f64>,
}

impl Decomposition {
    pub fn len(&self) -> usize {
        self.seasonal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seasonal.is_empty()
    }

    pub fn end(&self) -> IsoWeek {
        self.start.offset(self.len() as i64 - 1)
    }

    pub fn observed(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| self.trend[i] + self.seasonal[i] + self.remainder[i])
            .collect()
    }

    /// Deseasonalized component `trend + remainder`.
    pub fn deseasonalized(&self) -> Vec<f64> {
        self.trend
            .iter()
            .zip(&self.remainder)
            .map(|(t, r)| t + r)
            .collect()
    }

    /// The last fitted cycle.
    pub fn template(&self) -> SeasonalTemplate {
        let first = self.len() - self.period;
        SeasonalTemplate {
            anchor: self.start.offset(first as i64),
            values: self.seasonal[first..].to_vec(),
        }
    }

    /// Seasonal values for `len` weeks from `start`: fitted values inside the
    /// fitted region, template extension after it.
    pub fn seasonal_over(&self, start: IsoWeek, len: usize) -> Result<Vec<f64>> {
        if start < self.start {
            return Err(Error::Alignment(format!(
                "seasonal requested from {start}, decomposition starts at {}",
                self.start
            )));
        }
        let template = self.template();
        let offset = start.weeks_since(self.start) as usize;
        Ok((0..len)
            .map(|i| {
                let k = offset + i;
                if k < self.len() {
                    self.seasonal[k]
                } else {
                    template.value_at(self.start.offset(k as i64))
                }
            })
            .collect())
    }
}

impl SeasonalTemplate {
    pub fn period(&self) -> usize {
        self.values.len()
    }

    pub fn value_at(&self, week: IsoWeek) -> f64 {
        let phase = week
            .weeks_since(self.anchor)
            .rem_euclid(self.period() as i64);
        self.values[phase as usize]
    }
}

/// STL on a raw slice; weeks are numbered from [`IsoWeek::EPOCH`].
pub fn stl_decompose_values(values: &[f64], params: &StlParams) -> Result<Decomposition> {
    let fit = stl::stl(values, params)?;
    Ok(Decomposition {
        start: IsoWeek::EPOCH,
        period: params.period,
        trend: fit.trend,
        seasonal: fit.seasonal,
        remainder: fit.remainder,
    })
}

/// STL decomposition of a weekly series.
pub fn stl_decompose(series: &WeeklySeries, params: &StlParams) -> Result<Decomposition> {
    let mut d = stl_decompose_values(series.values(), params)?;
    d.start = series.start();
    Ok(d)
}

/// `series − seasonal` over exactly the decomposition's weeks.
pub fn deseasonalize(series: &WeeklySeries, d: &Decomposition) -> Result<WeeklySeries> {
    if series.start() != d.start || series.len() != d.len() {
        return Err(Error::Alignment(format!(
            "series covers {}..{} ({} weeks), decomposition {}..{} ({} weeks)",
            series.start(),
            series.end(),
            series.len(),
            d.start,
            d.end(),
            d.len()
        )));
    }
    let values = series
        .values()
        .iter()
        .zip(&d.seasonal)
        .map(|(x, s)| x - s)
        .collect();
    Ok(WeeklySeries::derived(
        series.country(),
        series.start(),
        values,
    ))
}

/// Seasonal values for the `steps` weeks after `from_week`.
pub fn extend_seasonal(template: &SeasonalTemplate, from_week: IsoWeek, steps: usize) -> Vec<f64> {
    (1..=steps as i64)
        .map(|k| template.value_at(from_week.offset(k)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sinusoid(n: usize) -> Vec<f64> {
        (0..n).map(|t| (2.0 * PI * t as f64 / 52.0).sin()).collect()
    }

    fn max_abs(v: impl Iterator<Item = f64>) -> f64 {
        v.fold(0.0, |m, x| m.max(x.abs()))
    }

    fn rms(v: &[f64]) -> f64 {
        (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
    }

    fn check_reconstruction(y: &[f64], d: &Decomposition) {
        let err = max_abs(d.observed().iter().zip(y).map(|(a, b)| a - b));
        assert!(err <= 1e-9, "reconstruction error {err}");
    }

    #[test]
    fn sinusoid_seasonal_recovered() {
        let y = sinusoid(208);
        let d = stl_decompose_values(&y, &StlParams::for_period(52)).unwrap();
        check_reconstruction(&y, &d);
        let dev = max_abs(d.seasonal.iter().zip(&y).map(|(s, t)| s - t));
        assert!(dev < 0.05, "seasonal deviation {dev}");
        assert!(rms(&d.remainder) < 0.05);
    }

    #[test]
    fn constant_series_has_no_seasonal() {
        let y = vec![3.5; 156];
        let d = stl_decompose_values(&y, &StlParams::for_period(52)).unwrap();
        check_reconstruction(&y, &d);
        assert!(max_abs(d.seasonal.iter().copied()) < 1e-6);
        assert!(max_abs(d.trend.iter().map(|t| t - 3.5)) < 1e-6);
    }

    #[test]
    fn trend_of_sinusoid_plus_line() {
        let slope = 0.02;
        let y: Vec<f64> = sinusoid(260)
            .iter()
            .enumerate()
            .map(|(t, s)| s + 1.0 + slope * t as f64)
            .collect();
        let d = stl_decompose_values(&y, &StlParams::for_period(52)).unwrap();
        check_reconstruction(&y, &d);
        // least-squares slope over interior points
        let idx: Vec<f64> = (52..208).map(|t| t as f64).collect();
        let tr = &d.trend[52..208];
        let mx = idx.iter().sum::<f64>() / idx.len() as f64;
        let my = tr.iter().sum::<f64>() / tr.len() as f64;
        let num: f64 = idx.iter().zip(tr).map(|(x, y)| (x - mx) * (y - my)).sum();
        let den: f64 = idx.iter().map(|x| (x - mx).powi(2)).sum();
        let fitted = num / den;
        assert!(((fitted - slope) / slope).abs() < 0.05, "slope {fitted}");
    }

    #[test]
    fn non_seasonal_series_gets_small_seasonal() {
        let y: Vec<f64> = (0..208)
            .map(|t| {
                let t = t as f64;
                2.0 + 0.03 * t + 0.05 * (t * 1.37).sin() * (t * 0.11).cos()
            })
            .collect();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let std = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
        let d = stl_decompose_values(&y, &StlParams::for_period(52)).unwrap();
        check_reconstruction(&y, &d);
        assert!(max_abs(d.seasonal.iter().copied()) < 0.05 * std);
    }

    #[test]
    fn periodic_input_gives_zero_mean_cycles() {
        let y: Vec<f64> = sinusoid(208)
            .iter()
            .enumerate()
            .map(|(t, s)| 4.0 + s + 0.3 * (4.0 * PI * t as f64 / 52.0).cos())
            .collect();
        let d = stl_decompose_values(&y, &StlParams::for_period(52)).unwrap();
        for cycle in d.seasonal.chunks(52) {
            let m = cycle.iter().sum::<f64>() / 52.0;
            assert!(m.abs() <= 1e-6, "cycle mean {m}");
        }
    }

    #[test]
    fn deseasonalize_direct_subtraction() {
        let series = WeeklySeries::derived("US", IsoWeek::EPOCH, vec![3.0, 4.0, 3.0, 4.0]);
        let d = Decomposition {
            start: IsoWeek::EPOCH,
            period: 2,
            trend: vec![2.0; 4],
            seasonal: vec![1.0, 2.0, 1.0, 2.0],
            remainder: vec![0.0; 4],
        };
        let out = deseasonalize(&series, &d).unwrap();
        assert_eq!(out.values(), &[2.0, 2.0, 2.0, 2.0]);
        for ((x, s), o) in series.values().iter().zip(&d.seasonal).zip(out.values()) {
            assert!((o + s - x).abs() <= 1e-12);
        }

        let zero = Decomposition {
            seasonal: vec![0.0; 4],
            ..d.clone()
        };
        assert_eq!(
            deseasonalize(&series, &zero).unwrap().values(),
            series.values()
        );

        let shifted =
            WeeklySeries::derived("US", IsoWeek::EPOCH.offset(1), vec![3.0, 4.0, 3.0, 4.0]);
        assert!(matches!(
            deseasonalize(&shifted, &d),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn extend_seasonal_periodic_lookup() {
        let template = SeasonalTemplate {
            anchor: IsoWeek::EPOCH,
            values: vec![1.0, 2.0, 3.0],
        };
        assert_eq!(
            extend_seasonal(&template, IsoWeek::EPOCH, 4),
            vec![2.0, 3.0, 1.0, 2.0]
        );
        assert!(extend_seasonal(&template, IsoWeek::EPOCH, 0).is_empty());
        let full = extend_seasonal(&template, IsoWeek::EPOCH.offset(-1), 3);
        assert_eq!(full, template.values);
        let long = extend_seasonal(&template, IsoWeek::EPOCH.offset(7), 20);
        for i in 0..long.len() - 3 {
            assert_eq!(long[i], long[i + 3]);
        }
    }

    #[test]
    fn template_is_last_cycle() {
        let y = sinusoid(208);
        let d = stl_decompose_values(&y, &StlParams::for_period(52)).unwrap();
        let t = d.template();
        assert_eq!(t.values.len(), 52);
        assert_eq!(t.anchor, IsoWeek::EPOCH.offset(156));
        assert_eq!(t.values[..], d.seasonal[156..]);
        let over = d.seasonal_over(IsoWeek::EPOCH.offset(200), 20).unwrap();
        assert_eq!(over[..8], d.seasonal[200..]);
        assert_eq!(over[8], d.seasonal[156]);
    }
}
