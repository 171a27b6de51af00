use std::collections::{HashMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};

/// Word vectors of one language in a shared (aligned) space.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    language: String,
    dim: usize,
    words: Vec<String>,
    /// Unit-normalized rows; all-zero vectors stay zero.
    unit: Vec<f64>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn from_vectors(
        language: impl Into<String>,
        entries: Vec<(String, Vec<f64>)>,
    ) -> Result<Self> {
        let dim = entries.first().map_or(0, |(_, v)| v.len());
        if dim == 0 {
            return Err(Error::Validation("embedding table is empty".into()));
        }
        let mut table = Self {
            language: language.into(),
            dim,
            words: Vec::with_capacity(entries.len()),
            unit: Vec::with_capacity(entries.len() * dim),
            index: HashMap::with_capacity(entries.len()),
        };
        for (word, v) in entries {
            if v.len() != dim {
                return Err(Error::Validation(format!(
                    "`{word}` has {} components, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation(format!(
                    "`{word}` has a non-finite component"
                )));
            }
            if table.index.contains_key(&word) {
                return Err(Error::Validation(format!("`{word}` listed twice")));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let scale = if norm > 0.0 { 1.0 / norm } else { 0.0 };
            table.unit.extend(v.iter().map(|x| x * scale));
            table.index.insert(word.clone(), table.words.len());
            table.words.push(word);
        }
        Ok(table)
    }

    /// Text format: `word v1 v2 ...` per line, with an optional `count dim`
    /// header line.
    pub fn parse(text: &str, language: &str, source: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.is_empty() {
                continue;
            }
            if i == 0 && parts.len() == 2 && parts.iter().all(|p| p.parse::<usize>().is_ok()) {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                msg,
            };
            let values: Vec<f64> = parts[1..]
                .iter()
                .map(|p| {
                    p.parse::<f64>()
                        .map_err(|_| err(format!("bad component `{p}`")))
                })
                .collect::<Result<_>>()?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(err(format!("{} components, expected {d}", values.len())));
                }
                _ => {}
            }
            if values.is_empty() {
                return Err(err("word without vector".into()));
            }
            entries.push((parts[0].to_string(), values));
        }
        Self::from_vectors(language, entries)
    }

    pub fn load(path: impl AsRef<Path>, language: &str) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, language, &path.display().to_string())
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    fn unit(&self, i: usize) -> &[f64] {
        &self.unit[i * self.dim..(i + 1) * self.dim]
    }

    /// Unit vector of `word`.
    pub fn vector(&self, word: &str) -> Result<&[f64]> {
        self.index.get(word).map(|&i| self.unit(i)).ok_or_else(|| {
            Error::OutOfVocabulary(format!("`{word}` not in {} embeddings", self.language))
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of `a` in `source` and `b` in `target`.
pub fn cosine(a: &str, source: &EmbeddingTable, b: &str, target: &EmbeddingTable) -> Result<f64> {
    check_dims(source, target)?;
    Ok(dot(source.vector(a)?, target.vector(b)?).clamp(-1.0, 1.0))
}

fn check_dims(source: &EmbeddingTable, target: &EmbeddingTable) -> Result<()> {
    if source.dim != target.dim {
        return Err(Error::shape(
            "embedding dims",
            (1, source.dim),
            (1, target.dim),
        ));
    }
    Ok(())
}

/// The `k` target words most similar to `word`, descending; ties go to the
/// lexicographically smaller word.
pub fn cosine_topk(
    word: &str,
    source: &EmbeddingTable,
    target: &EmbeddingTable,
    k: usize,
) -> Result<Vec<(String, f64)>> {
    check_dims(source, target)?;
    let v = source.vector(word)?;
    let mut scored: Vec<(f64, usize)> = (0..target.len())
        .map(|i| (dot(v, target.unit(i)).clamp(-1.0, 1.0), i))
        .collect();
    let order = |a: &(f64, usize), b: &(f64, usize)| {
        b.0.total_cmp(&a.0)
            .then_with(|| target.words[a.1].cmp(&target.words[b.1]))
    };
    if k < scored.len() {
        scored.select_nth_unstable_by(k, order);
        scored.truncate(k);
    }
    scored.sort_by(order);
    Ok(scored
        .into_iter()
        .map(|(s, i)| (target.words[i].clone(), s))
        .collect())
}

/// Built-in stopword list ("prepositions and articles", particles for
/// Japanese) for `en`, `fr` or `ja`.
pub fn builtin_stopwords(language: &str) -> Option<HashSet<String>> {
    let text = match language {
        "en" => include_str!("../../data/stopwords/en.txt"),
        "fr" => include_str!("../../data/stopwords/fr.txt"),
        "ja" => include_str!("../../data/stopwords/ja.txt"),
        _ => return None,
    };
    Some(parse_stopwords(text))
}

pub fn parse_stopwords(text: &str) -> HashSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

pub fn load_stopwords(path: impl AsRef<Path>) -> Result<HashSet<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_stopwords(&text))
}
