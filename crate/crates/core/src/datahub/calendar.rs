use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// ISO week on a calendar of 52-week years (week 53 never exists here).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IsoWeek {
    year: i32,
    week: u8,
}

/// A week label as it appears in input files, before week 53 is dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeekLabel {
    Week(IsoWeek),
    Week53(i32),
}

impl IsoWeek {
    pub const EPOCH: IsoWeek = IsoWeek { year: 0, week: 1 };

    pub fn new(year: i32, week: u8) -> Result<Self> {
        if !(1..=52).contains(&week) {
            return Err(Error::Validation(format!("week {week} outside 1..=52")));
        }
        Ok(Self { year, week })
    }

    pub fn year(self) -> i32 {
        self.year
    }

    pub fn week(self) -> u8 {
        self.week
    }

    /// Position on the 52-week calendar.
    pub fn ordinal(self) -> i64 {
        i64::from(self.year) * 52 + i64::from(self.week) - 1
    }

    pub fn from_ordinal(ordinal: i64) -> Self {
        let year = ordinal.div_euclid(52);
        let week = ordinal.rem_euclid(52) + 1;
        Self {
            year: year as i32,
            week: week as u8,
        }
    }

    pub fn offset(self, weeks: i64) -> Self {
        Self::from_ordinal(self.ordinal() + weeks)
    }

    pub fn weeks_since(self, earlier: IsoWeek) -> i64 {
        self.ordinal() - earlier.ordinal()
    }

    /// Parse `YYYY-Www`. Week 53 is reported separately so callers can drop it.
    pub fn parse_label(s: &str) -> Result<WeekLabel> {
        let bad = || Error::Validation(format!("malformed ISO week `{s}` (expected YYYY-Www)"));
        let (y, w) = s.trim().split_once("-W").ok_or_else(bad)?;
        if y.len() != 4 || w.len() != 2 {
            return Err(bad());
        }
        let year: i32 = y.parse().map_err(|_| bad())?;
        let week: u8 = w.parse().map_err(|_| bad())?;
        match week {
            1..=52 => Ok(WeekLabel::Week(IsoWeek { year, week })),
            53 => Ok(WeekLabel::Week53(year)),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for IsoWeek {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-W{:02}", self.year, self.week)
    }
}

impl FromStr for IsoWeek {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match IsoWeek::parse_label(s)? {
            WeekLabel::Week(w) => Ok(w),
            WeekLabel::Week53(_) => Err(Error::Validation(format!(
                "week 53 is not representable: `{s}`"
            ))),
        }
    }
}

impl Serialize for IsoWeek {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for IsoWeek {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Inclusive run of consecutive weeks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeekRange {
    pub start: IsoWeek,
    pub len: usize,
}

impl WeekRange {
    pub fn new(start: IsoWeek, len: usize) -> Self {
        Self { start, len }
    }

    pub fn between(start: IsoWeek, end_inclusive: IsoWeek) -> Self {
        let len = (end_inclusive.weeks_since(start) + 1).max(0) as usize;
        Self { start, len }
    }

    pub fn end(&self) -> IsoWeek {
        self.start.offset(self.len as i64 - 1)
    }

    /// First week after the range.
    pub fn after(&self) -> IsoWeek {
        self.start.offset(self.len as i64)
    }

    pub fn contains(&self, w: IsoWeek) -> bool {
        w >= self.start && w.weeks_since(self.start) < self.len as i64
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}
