use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::calendar::{IsoWeek, WeekLabel, WeekRange};
use super::series::WeeklySeries;
use crate::error::{Error, Result};

/// `L` query series aligned week-by-week to a [`WeeklySeries`].
/// `values` is row-major: one row per week, one column per query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPanel {
    pub country: String,
    pub start: IsoWeek,
    pub queries: Vec<String>,
    values: Vec<f64>,
}

/// Training-range extrema used to normalize one query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * (self.max - self.min) + self.min
    }
}

impl QueryPanel {
    pub fn new(
        country: impl Into<String>,
        start: IsoWeek,
        queries: Vec<String>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let l = queries.len();
        if (l == 0 && !values.is_empty()) || (l > 0 && !values.len().is_multiple_of(l)) {
            return Err(Error::shape("QueryPanel::new", (values.len(), 1), (0, l)));
        }
        Ok(Self {
            country: country.into(),
            start,
            queries,
            values,
        })
    }

    /// Build from one series per query (all the same length).
    pub fn from_columns(
        country: impl Into<String>,
        start: IsoWeek,
        queries: Vec<String>,
        columns: &[Vec<f64>],
    ) -> Result<Self> {
        let weeks = columns.first().map_or(0, Vec::len);
        if columns.len() != queries.len() || columns.iter().any(|c| c.len() != weeks) {
            return Err(Error::shape(
                "QueryPanel::from_columns",
                (weeks, columns.len()),
                (weeks, queries.len()),
            ));
        }
        let mut values = Vec::with_capacity(weeks * queries.len());
        for i in 0..weeks {
            values.extend(columns.iter().map(|c| c[i]));
        }
        Self::new(country, start, queries, values)
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn num_weeks(&self) -> usize {
        if self.queries.is_empty() {
            0
        } else {
            self.values.len() / self.queries.len()
        }
    }

    pub fn range(&self) -> WeekRange {
        WeekRange::new(self.start, self.num_weeks())
    }

    pub fn get(&self, week_idx: usize, query: usize) -> f64 {
        self.values[week_idx * self.queries.len() + query]
    }

    pub fn row(&self, week_idx: usize) -> &[f64] {
        let l = self.queries.len();
        &self.values[week_idx * l..(week_idx + 1) * l]
    }

    pub fn column(&self, query: usize) -> Vec<f64> {
        (0..self.num_weeks()).map(|i| self.get(i, query)).collect()
    }

    pub fn index_of(&self, week: IsoWeek) -> Option<usize> {
        let k = week.weeks_since(self.start);
        (k >= 0 && (k as usize) < self.num_weeks()).then_some(k as usize)
    }

    fn training_rows(&self, training: WeekRange) -> Result<std::ops::Range<usize>> {
        let lo = self.index_of(training.start);
        let hi = self.index_of(training.end());
        match (lo, hi, training.is_empty()) {
            (Some(lo), Some(hi), false) => Ok(lo..hi + 1),
            _ => Err(Error::Alignment(format!(
                "{}: training range {}..{} not inside panel",
                self.country,
                training.start,
                training.end()
            ))),
        }
    }

    /// Keep only the listed query columns, in the given order.
    pub fn select(&self, keep: &[usize]) -> QueryPanel {
        let queries = keep.iter().map(|&j| self.queries[j].clone()).collect();
        let mut values = Vec::with_capacity(self.num_weeks() * keep.len());
        for i in 0..self.num_weeks() {
            values.extend(keep.iter().map(|&j| self.get(i, j)));
        }
        QueryPanel {
            country: self.country.clone(),
            start: self.start,
            queries,
            values,
        }
    }
}

/// File slug for a query: lowercase, spaces to underscores, other
/// non-alphanumeric characters removed. Unicode letters are kept.
pub fn query_slug(query: &str) -> String {
    query
        .trim()
        .to_lowercase()
        .chars()
        .filter_map(|c| {
            if c == ' ' {
                Some('_')
            } else if c.is_alphanumeric() {
                Some(c)
            } else {
                None
            }
        })
        .collect()
}

#[derive(Debug, Deserialize)]
struct TrendRow {
    iso_week: String,
    value: f64,
}

/// Read one `iso_week,value` file. Week-53 rows are dropped.
pub fn read_trends_file(path: impl AsRef<Path>) -> Result<BTreeMap<IsoWeek, f64>> {
    let path = path.as_ref();
    let source = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = rdr.headers().map_err(|e| perr(&source, 1, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["iso_week", "value"] {
        return Err(perr(&source, 1, "header must be `iso_week,value`"));
    }
    let mut out = BTreeMap::new();
    for record in rdr.records() {
        let record =
            record.map_err(|e| perr(&source, e.position().map_or(0, |p| p.line() as usize), e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let row: TrendRow = record
            .deserialize(Some(&headers))
            .map_err(|e| perr(&source, line, e))?;
        if !row.value.is_finite() {
            return Err(perr(&source, line, "non-finite value"));
        }
        if let WeekLabel::Week(w) =
            IsoWeek::parse_label(&row.iso_week).map_err(|e| perr(&source, line, e))?
        {
            out.insert(w, row.value);
        }
    }
    Ok(out)
}

fn perr(source: &str, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: source.to_string(),
        line,
        msg: msg.to_string(),
    }
}

/// Values for each week of `range`: missing weeks are forward-filled, weeks
/// before the first observation are zero.
pub fn align_forward_fill(observed: &BTreeMap<IsoWeek, f64>, range: WeekRange) -> Vec<f64> {
    let mut last = observed
        .range(..range.start)
        .next_back()
        .map_or(0.0, |(_, v)| *v);
    (0..range.len as i64)
        .map(|k| {
            let w = range.start.offset(k);
            if let Some(v) = observed.get(&w) {
                last = *v;
            }
            last
        })
        .collect()
}

/// Load one CSV per query from `dir` (named by [`query_slug`]) and align to
/// the weeks of `series`.
pub fn load_trends(
    dir: impl AsRef<Path>,
    queries: &[String],
    series: &WeeklySeries,
) -> Result<QueryPanel> {
    let dir = dir.as_ref();
    let mut seen: HashMap<String, &str> = HashMap::new();
    for q in queries {
        let slug = query_slug(q);
        if let Some(other) = seen.insert(slug.clone(), q) {
            return Err(Error::Validation(format!(
                "queries `{other}` and `{q}` share the file slug `{slug}`"
            )));
        }
    }
    let missing: Vec<String> = queries
        .iter()
        .filter(|q| !dir.join(format!("{}.csv", query_slug(q))).is_file())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingQueries(missing));
    }
    let columns = queries
        .iter()
        .map(|q| {
            let observed = read_trends_file(dir.join(format!("{}.csv", query_slug(q))))?;
            Ok(align_forward_fill(&observed, series.range()))
        })
        .collect::<Result<Vec<_>>>()?;
    QueryPanel::from_columns(series.country(), series.start(), queries.to_vec(), &columns)
}

/// Min-max normalize every query with extrema taken over `training` only.
/// Values outside the training range are not clipped.
pub fn minmax_fit_apply(
    panel: &QueryPanel,
    training: WeekRange,
) -> Result<(QueryPanel, Vec<MinMax>)> {
    let rows = panel.training_rows(training)?;
    let l = panel.num_queries();
    let mut scales = Vec::with_capacity(l);
    for j in 0..l {
        let (min, max) = rows
            .clone()
            .map(|i| panel.get(i, j))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
        if max <= min {
            return Err(Error::DegenerateQuery(panel.queries[j].clone()));
        }
        scales.push(MinMax { min, max });
    }
    let values = panel
        .values
        .chunks(l.max(1))
        .flat_map(|row| row.iter().zip(&scales).map(|(v, s)| s.apply(*v)))
        .collect();
    let normalized = QueryPanel {
        values,
        ..panel.clone()
    };
    Ok((normalized, scales))
}

/// Like [`minmax_fit_apply`], but constant queries are dropped with a warning
/// instead of failing. Returns the dropped query names as well.
pub fn minmax_fit_apply_dropping(
    panel: &QueryPanel,
    training: WeekRange,
) -> Result<(QueryPanel, Vec<MinMax>, Vec<String>)> {
    let rows = panel.training_rows(training)?;
    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..panel.num_queries() {
        let first = panel.get(rows.start, j);
        if rows.clone().all(|i| panel.get(i, j) == first) {
            log::warn!(
                "{}: query `{}` is constant over the training range; dropped",
                panel.country,
                panel.queries[j]
            );
            dropped.push(panel.queries[j].clone());
        } else {
            keep.push(j);
        }
    }
    if keep.is_empty() && panel.num_queries() > 0 {
        return Err(Error::DegenerateQuery(dropped.join(", ")));
    }
    let (p, s) = minmax_fit_apply(&panel.select(&keep), training)?;
    Ok((p, s, dropped))
}

/// Read a query list: either a `selected_queries.csv` (uses the `selected`
/// column) or plain text with one query per line.
pub fn read_query_list(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let source = path.display().to_string();
    let first = text.lines().next().unwrap_or("");
    if first.trim_start().starts_with("english,selected") {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let col = rdr
            .headers()
            .map_err(|e| perr(&source, 1, e))?
            .iter()
            .position(|h| h == "selected")
            .ok_or_else(|| perr(&source, 1, "missing `selected` column"))?;
        rdr.records()
            .map(|r| {
                let r = r.map_err(|e| perr(&source, 0, e))?;
                Ok(r.get(col).unwrap_or("").to_string())
            })
            .collect()
    } else {
        Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect())
    }
}
