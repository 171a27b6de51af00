//! Per-country search-query selection from aligned word embeddings and
//! trends correlation, or from a supplied translation mapping.

mod embedding;
mod select;

pub use embedding::{
    builtin_stopwords, cosine, cosine_topk, load_stopwords, parse_stopwords, EmbeddingTable,
};
pub use select::{
    best_candidate, enumerate_candidates, pearson, phrase_similarity, score_candidates,
    translation_select, write_selected, wt_select, DirTrends, QueryCandidate, Selection,
    TrendsSource, WtParams,
};
