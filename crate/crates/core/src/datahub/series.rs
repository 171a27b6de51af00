use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::calendar::{IsoWeek, WeekLabel, WeekRange};
use crate::error::{Error, Result};

/// One country's weekly values over consecutive weeks from `start`.
///
/// Observed ILI series hold non-negative rates; derived series (e.g. the
/// deseasonalized component) may go negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeeklySeries {
    country: String,
    start: IsoWeek,
    values: Vec<f64>,
}

impl WeeklySeries {
    /// Observed ILI series: values must be finite and non-negative.
    pub fn new(country: impl Into<String>, start: IsoWeek, values: Vec<f64>) -> Result<Self> {
        let country = country.into();
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::Validation(format!(
                "{country}: ILI rate {v} at {} must be finite and non-negative",
                start.offset(i as i64)
            )));
        }
        Ok(Self {
            country,
            start,
            values,
        })
    }

    pub fn derived(country: impl Into<String>, start: IsoWeek, values: Vec<f64>) -> Self {
        Self {
            country: country.into(),
            start,
            values,
        }
    }

    pub fn country(&self) -> &str {
        &self.country
    }

    pub fn start(&self) -> IsoWeek {
        self.start
    }

    pub fn end(&self) -> IsoWeek {
        self.start.offset(self.values.len() as i64 - 1)
    }

    pub fn range(&self) -> WeekRange {
        WeekRange::new(self.start, self.values.len())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn weeks(&self) -> impl Iterator<Item = IsoWeek> + '_ {
        (0..self.values.len() as i64).map(|i| self.start.offset(i))
    }

    pub fn index_of(&self, week: IsoWeek) -> Option<usize> {
        let k = week.weeks_since(self.start);
        (k >= 0 && (k as usize) < self.values.len()).then_some(k as usize)
    }

    /// Values over `range`, which must lie inside the series.
    pub fn slice(&self, range: WeekRange) -> Result<&[f64]> {
        let i = self
            .index_of(range.start)
            .ok_or_else(|| self.outside(range))?;
        if i + range.len > self.values.len() {
            return Err(self.outside(range));
        }
        Ok(&self.values[i..i + range.len])
    }

    /// Sub-series over `range`.
    pub fn restrict(&self, range: WeekRange) -> Result<WeeklySeries> {
        Ok(WeeklySeries::derived(
            &self.country,
            range.start,
            self.slice(range)?.to_vec(),
        ))
    }

    fn outside(&self, range: WeekRange) -> Error {
        Error::Alignment(format!(
            "{}: weeks {}..{} outside series {}..{}",
            self.country,
            range.start,
            range.end(),
            self.start,
            self.end()
        ))
    }
}

#[derive(Debug, Deserialize)]
struct IliRow {
    iso_week: String,
    country: String,
    ili_rate: f64,
}

/// Read `iso_week,country,ili_rate`. Rows may come in any order; week-53 rows
/// are dropped and any other gap is an error.
pub fn load_ili(path: impl AsRef<Path>) -> Result<BTreeMap<String, WeeklySeries>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_ili(file, &path.display().to_string())
}

pub fn read_ili(
    reader: impl std::io::Read,
    source: &str,
) -> Result<BTreeMap<String, WeeklySeries>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| parse_err(source, 1, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["iso_week", "country", "ili_rate"] {
        return Err(parse_err(
            source,
            1,
            "header must be `iso_week,country,ili_rate`",
        ));
    }

    let mut rows: BTreeMap<String, BTreeMap<IsoWeek, f64>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(source, line, e)
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let row: IliRow = record
            .deserialize(Some(&headers))
            .map_err(|e| parse_err(source, line, e))?;
        let week =
            match IsoWeek::parse_label(&row.iso_week).map_err(|e| parse_err(source, line, e))? {
                WeekLabel::Week(w) => w,
                WeekLabel::Week53(_) => continue,
            };
        if !row.ili_rate.is_finite() || row.ili_rate < 0.0 {
            return Err(Error::Validation(format!(
                "{source}:{line}: ILI rate {} for {} {} must be non-negative",
                row.ili_rate, row.country, row.iso_week
            )));
        }
        if rows
            .entry(row.country.clone())
            .or_default()
            .insert(week, row.ili_rate)
            .is_some()
        {
            return Err(parse_err(
                source,
                line,
                format!("duplicate row for {} {}", row.country, week),
            ));
        }
    }

    rows.into_iter()
        .map(|(country, weeks)| {
            let start = *weeks.keys().next().expect("country has at least one row");
            let end = *weeks
                .keys()
                .next_back()
                .expect("country has at least one row");
            let span = end.weeks_since(start) as usize + 1;
            if span != weeks.len() {
                let missing: Vec<String> = (0..span as i64)
                    .map(|k| start.offset(k))
                    .filter(|w| !weeks.contains_key(w))
                    .map(|w| w.to_string())
                    .collect();
                return Err(Error::MissingWeeks {
                    country,
                    weeks: missing.join(", "),
                });
            }
            let series = WeeklySeries::new(country.clone(), start, weeks.into_values().collect())?;
            Ok((country, series))
        })
        .collect()
}

fn parse_err(source: &str, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: source.to_string(),
        line,
        msg: msg.to_string(),
    }
}

/// Write series in the `load_ili` format, countries in the given order.
pub fn write_ili<'a>(
    path: impl AsRef<Path>,
    series: impl IntoIterator<Item = &'a WeeklySeries>,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "iso_week,country,ili_rate").map_err(io)?;
    for s in series {
        for (week, v) in s.weeks().zip(s.values()) {
            writeln!(w, "{week},{},{v:?}", s.country()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}
