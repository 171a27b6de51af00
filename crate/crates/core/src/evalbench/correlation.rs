use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datahub::{WeekRange, WeeklySeries};
use crate::error::{Error, Result};
use crate::querysel::pearson;

/// Pairwise Pearson correlations between countries' series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub countries: Vec<String>,
    /// Row-major `C × C`.
    pub matrix: Vec<Vec<f64>>,
    /// Weeks each series was moved forward before comparing.
    pub shifts: BTreeMap<String, i64>,
}

impl CorrelationReport {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.countries.iter().position(|c| c == a)?;
        let j = self.countries.iter().position(|c| c == b)?;
        Some(self.matrix[i][j])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("country");
        for c in &self.countries {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for (c, row) in self.countries.iter().zip(&self.matrix) {
            s.push_str(c);
            for v in row {
                let _ = write!(s, ",{v:?}");
            }
            s.push('\n');
        }
        s
    }
}

/// Parse `AU:22,FR:-3`.
pub fn parse_shifts(text: &str) -> Result<BTreeMap<String, i64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (c, w) = item
                .split_once(':')
                .ok_or_else(|| Error::Param(format!("shift `{item}` is not COUNTRY:WEEKS")))?;
            let w = w
                .trim()
                .parse()
                .map_err(|_| Error::Param(format!("shift `{item}`: bad week count")))?;
            Ok((c.trim().to_string(), w))
        })
        .collect()
}

/// Min-max normalize each series (over `normalize_on` when given, else its
/// whole span), move it forward by its shift (`x'(w) = x(w − shift)`), and
/// correlate every pair over the weeks both cover.
pub fn correlation_report(
    series: &[WeeklySeries],
    shifts: &BTreeMap<String, i64>,
    normalize_on: Option<WeekRange>,
) -> Result<CorrelationReport> {
    if let Some(c) = shifts
        .keys()
        .find(|c| !series.iter().any(|s| s.country() == c.as_str()))
    {
        return Err(Error::UnknownCountry(c.clone()));
    }
    let prepared: Vec<WeeklySeries> = series
        .iter()
        .map(|s| {
            let basis = match normalize_on {
                Some(r) => s.slice(r)?,
                None => s.values(),
            };
            let lo = basis.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = basis.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            let values = s
                .values()
                .iter()
                .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
                .collect();
            let shift = shifts.get(s.country()).copied().unwrap_or(0);
            Ok(WeeklySeries::derived(
                s.country(),
                s.start().offset(shift),
                values,
            ))
        })
        .collect::<Result<_>>()?;

    let c = prepared.len();
    let mut matrix = vec![vec![0.0; c]; c];
    for i in 0..c {
        matrix[i][i] = 1.0;
        for j in i + 1..c {
            let (a, b) = (&prepared[i], &prepared[j]);
            let start = a.start().max(b.start());
            let end = a.end().min(b.end());
            let overlap = (end.weeks_since(start) + 1).max(0) as usize;
            if overlap < 3 {
                return Err(Error::InsufficientData {
                    what: format!("overlapping weeks of {} and {}", a.country(), b.country()),
                    required: 3,
                    available: overlap,
                });
            }
            let r = WeekRange::new(start, overlap);
            let v = pearson(a.slice(r)?, b.slice(r)?)?;
            matrix[i][j] = v;
            matrix[j][i] = v;
        }
    }
    Ok(CorrelationReport {
        countries: prepared.iter().map(|s| s.country().to_string()).collect(),
        matrix,
        shifts: shifts.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datahub::IsoWeek;

    fn seasonal(country: &str, start: IsoWeek, len: usize, phase: f64) -> WeeklySeries {
        let v = (0..len)
            .map(|t| 2.0 + (2.0 * std::f64::consts::PI * (t as f64 + phase) / 52.0).sin())
            .collect();
        WeeklySeries::new(country, start, v).unwrap()
    }

    #[test]
    fn shift_aligns_opposite_hemisphere() {
        let start: IsoWeek = "2012-W01".parse().unwrap();
        let us = seasonal("US", start, 260, 0.0);
        // AU runs 22 weeks ahead of US.
        let au = seasonal("AU", start, 260, 22.0);
        let plain = correlation_report(&[us.clone(), au.clone()], &BTreeMap::new(), None).unwrap();
        let shifted = correlation_report(&[us, au], &parse_shifts("AU:22").unwrap(), None).unwrap();
        assert!(plain.get("US", "AU").unwrap() < 0.5);
        assert!((shifted.get("US", "AU").unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(shifted.get("AU", "AU"), Some(1.0));
        assert!(shifted.to_csv().starts_with("country,US,AU\nUS,1.0,"));
    }

    #[test]
    fn disjoint_series_rejected() {
        let a = seasonal("US", "2012-W01".parse().unwrap(), 10, 0.0);
        let b = seasonal("JP", "2014-W01".parse().unwrap(), 10, 0.0);
        assert!(matches!(
            correlation_report(&[a, b], &BTreeMap::new(), None),
            Err(Error::InsufficientData { .. })
        ));
        assert!(parse_shifts("AU=22").is_err());
    }
}
