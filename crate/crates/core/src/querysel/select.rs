use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::embedding::{cosine, cosine_topk, EmbeddingTable};
use crate::datahub::{
    align_forward_fill, query_slug, read_trends_file, IsoWeek, WeekRange, WeeklySeries,
};
use crate::error::{Error, Result};

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("pearson", (a.len(), 1), (b.len(), 1)));
    }
    if a.len() < 3 {
        return Err(Error::InsufficientData {
            what: "pearson correlation points".into(),
            required: 3,
            available: a.len(),
        });
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate(
            "pearson correlation of a constant series".into(),
        ));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

fn content_tokens(query: &str, stopwords: &HashSet<String>) -> Vec<String> {
    query
        .split_whitespace()
        .map(str::to_lowercase)
        .filter(|t| !stopwords.contains(t))
        .collect()
}

/// Θ_w: mean cosine over greedily matched content-word pairs. Pairs are taken
/// in descending similarity (ties by token positions) until one side runs out.
pub fn phrase_similarity(
    english_query: &str,
    candidate_query: &str,
    source: &EmbeddingTable,
    target: &EmbeddingTable,
    stopwords: &HashSet<String>,
) -> Result<f64> {
    let a = content_tokens(english_query, stopwords);
    let b = content_tokens(candidate_query, stopwords);
    for (q, toks) in [(english_query, &a), (candidate_query, &b)] {
        if toks.is_empty() {
            return Err(Error::EmptyContent(format!("`{q}` has only stopwords")));
        }
    }
    let mut pairs = Vec::with_capacity(a.len() * b.len());
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            pairs.push((cosine(x, source, y, target)?, i, j));
        }
    }
    pairs.sort_by(|p, q| q.0.total_cmp(&p.0).then((p.1, p.2).cmp(&(q.1, q.2))));
    let (mut used_a, mut used_b) = (vec![false; a.len()], vec![false; b.len()]);
    let (mut sum, mut count) = (0.0, 0usize);
    for (s, i, j) in pairs {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            sum += s;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// A scored translation candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryCandidate {
    pub english: String,
    pub candidate: String,
    pub theta_w: f64,
    pub theta_t: f64,
    pub combined: f64,
}

impl QueryCandidate {
    pub fn new(english: &str, candidate: &str, theta_w: f64, theta_t: f64) -> Self {
        Self {
            english: english.to_string(),
            candidate: candidate.to_string(),
            theta_w,
            theta_t,
            combined: theta_w + theta_t,
        }
    }
}

/// Source of weekly trends observations for a target-language query.
pub trait TrendsSource: Sync {
    /// Observations for `query`, or `None` if nothing is available.
    fn fetch(&self, query: &str) -> Result<Option<BTreeMap<IsoWeek, f64>>>;
}

/// One `<slug>.csv` per query in a directory.
#[derive(Debug, Clone)]
pub struct DirTrends {
    pub dir: PathBuf,
}

impl DirTrends {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl TrendsSource for DirTrends {
    fn fetch(&self, query: &str) -> Result<Option<BTreeMap<IsoWeek, f64>>> {
        let path = self.dir.join(format!("{}.csv", query_slug(query)));
        if !path.exists() {
            return Ok(None);
        }
        read_trends_file(&path).map(Some)
    }
}

impl TrendsSource for BTreeMap<String, BTreeMap<IsoWeek, f64>> {
    fn fetch(&self, query: &str) -> Result<Option<BTreeMap<IsoWeek, f64>>> {
        Ok(self.get(query).cloned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WtParams {
    /// Nearest target words per content token.
    pub k: usize,
    /// Candidates kept per query, best Θ_w first, before trends are fetched.
    pub max_candidates: usize,
    /// Upper bound on the cartesian product before per-token lists are cut.
    pub max_product: usize,
}

impl Default for WtParams {
    fn default() -> Self {
        Self {
            k: 100,
            max_candidates: 200,
            max_product: 100_000,
        }
    }
}

/// Candidate phrases for `english`: the cartesian product of each content
/// token's nearest target words, scored by Θ_w and cut to the best
/// `max_candidates`. Returned as (candidate, Θ_w), best first.
pub fn enumerate_candidates(
    english: &str,
    source: &EmbeddingTable,
    target: &EmbeddingTable,
    stopwords: &HashSet<String>,
    params: &WtParams,
) -> Result<Vec<(String, f64)>> {
    if params.k == 0 {
        return Err(Error::Param("k must be ≥ 1".into()));
    }
    let tokens = content_tokens(english, stopwords);
    if tokens.is_empty() {
        return Err(Error::EmptyContent(format!(
            "`{english}` has only stopwords"
        )));
    }
    let mut k = params.k;
    while k > 1 && k.saturating_pow(tokens.len() as u32) > params.max_product {
        k -= 1;
    }
    let lists: Vec<Vec<String>> = tokens
        .iter()
        .map(|t| {
            Ok(cosine_topk(t, source, target, k)?
                .into_iter()
                .map(|(w, _)| w)
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut phrases: BTreeSet<String> = BTreeSet::new();
    let mut idx = vec![0usize; lists.len()];
    'outer: loop {
        let words: Vec<&str> = idx
            .iter()
            .zip(&lists)
            .map(|(&i, l)| l[i].as_str())
            .collect();
        phrases.insert(words.join(" "));
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < lists[d].len() {
                continue 'outer;
            }
            idx[d] = 0;
        }
        break;
    }
    let mut scored: Vec<(String, f64)> = phrases
        .into_iter()
        .map(|p| {
            let s = phrase_similarity(english, &p, source, target, stopwords)?;
            Ok((p, s))
        })
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(params.max_candidates);
    Ok(scored)
}

/// Θ_t for each candidate over the training weeks; candidates without data
/// (or with a constant series there) are dropped.
pub fn score_candidates(
    english: &str,
    candidates: &[(String, f64)],
    trends: &dyn TrendsSource,
    ili: &WeeklySeries,
    training: WeekRange,
) -> Result<Vec<QueryCandidate>> {
    let y = ili.slice(training)?;
    let scored: Vec<Result<Option<QueryCandidate>>> = candidates
        .par_iter()
        .map(|(cand, theta_w)| {
            let Some(obs) = trends.fetch(cand)? else {
                return Ok(None);
            };
            if !obs.keys().any(|w| training.contains(*w)) {
                return Ok(None);
            }
            let x = align_forward_fill(&obs, training);
            match pearson(&x, y) {
                Ok(t) => Ok(Some(QueryCandidate::new(english, cand, *theta_w, t))),
                Err(Error::Degenerate(_)) => {
                    log::warn!("`{cand}`: constant over training weeks, skipped");
                    Ok(None)
                }
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut out = Vec::new();
    for r in scored {
        out.extend(r?);
    }
    Ok(out)
}

/// Highest Θ_w + Θ_t; ties go to the lexicographically smaller candidate.
pub fn best_candidate(scored: &[QueryCandidate]) -> Option<&QueryCandidate> {
    scored.iter().min_by(|a, b| {
        b.combined
            .total_cmp(&a.combined)
            .then_with(|| a.candidate.cmp(&b.candidate))
    })
}

/// WT-based selection: one target-language query per English query.
#[allow(clippy::too_many_arguments)]
pub fn wt_select(
    english_queries: &[String],
    source: &EmbeddingTable,
    target: &EmbeddingTable,
    trends: &dyn TrendsSource,
    ili: &WeeklySeries,
    training: WeekRange,
    stopwords: &HashSet<String>,
    params: &WtParams,
) -> Result<Vec<QueryCandidate>> {
    english_queries
        .iter()
        .map(|q| {
            let candidates = enumerate_candidates(q, source, target, stopwords, params)?;
            let scored = score_candidates(q, &candidates, trends, ili, training)?;
            best_candidate(&scored).cloned().ok_or_else(|| {
                Error::SelectionFailure(format!(
                    "`{q}`: none of {} candidates has trends data for {}",
                    candidates.len(),
                    ili.country()
                ))
            })
        })
        .collect()
}

#[derive(Debug, Deserialize)]
struct MappingRow {
    english: String,
    selected: String,
}

/// Queries from a user-supplied `english,selected` mapping, in the order of
/// `english_queries`.
pub fn translation_select(
    mapping_file: impl AsRef<Path>,
    english_queries: &[String],
) -> Result<Vec<String>> {
    let path = mapping_file.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
    let mut map = BTreeMap::new();
    for (i, row) in rdr.deserialize::<MappingRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 2,
            msg: e.to_string(),
        })?;
        map.insert(row.english, row.selected);
    }
    let missing: Vec<&str> = english_queries
        .iter()
        .filter(|q| !map.contains_key(*q))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::IncompleteMapping(format!(
            "{} has no row for: {}",
            path.display(),
            missing.join(", ")
        )));
    }
    Ok(english_queries.iter().map(|q| map[q].clone()).collect())
}

/// One row of `selected_queries.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub english: String,
    pub selected: String,
    pub theta_w: Option<f64>,
    pub theta_t: Option<f64>,
}

impl From<&QueryCandidate> for Selection {
    fn from(c: &QueryCandidate) -> Self {
        Self {
            english: c.english.clone(),
            selected: c.candidate.clone(),
            theta_w: Some(c.theta_w),
            theta_t: Some(c.theta_t),
        }
    }
}

pub fn write_selected(path: impl AsRef<Path>, rows: &[Selection]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["english", "selected", "theta_w", "theta_t", "score"])
        .map_err(csv_err)?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for r in rows {
        let score = r.theta_w.zip(r.theta_t).map(|(a, b)| a + b);
        w.write_record([
            r.english.as_str(),
            r.selected.as_str(),
            &fmt(r.theta_w),
            &fmt(r.theta_t),
            &fmt(score),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
