use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{GradTape, Rng, Tensor2, Var};

/// Recurrent cell variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    /// Candidate `tanh(x·U_h + h ⊙ (r·W_h))`, no biases.
    #[default]
    Literal,
    /// Textbook candidate `tanh(x·U_h + (r ⊙ h)·W_h)`, no biases.
    Standard,
}

/// How search queries enter the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Shared query encoder plus per-country dot-product attention.
    #[default]
    Attention,
    /// Query values appended as extra ILI-encoder input channels.
    Concat,
    /// Queries ignored.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// GRU width `M`.
    pub hidden: usize,
    /// Input weeks `N`.
    pub input_weeks: usize,
    /// Forecast horizon `S`.
    pub horizon: usize,
    /// Queries per country `L` (0 when `query_mode` is `None`).
    pub num_queries: usize,
    /// Countries with their own heads; ids are positions + 1.
    pub roster: Vec<String>,
    pub cell: CellKind,
    pub query_mode: QueryMode,
    /// Model the STL-deseasonalized series (else raw ILI).
    pub deseasonalize: bool,
    /// Learned per-country initial encoder state.
    pub country_embedding: bool,
    /// One fusion MLP for all countries (else one per country).
    pub shared_fusion: bool,
}

impl ModelConfig {
    pub fn new(
        hidden: usize,
        input_weeks: usize,
        horizon: usize,
        num_queries: usize,
        roster: Vec<String>,
    ) -> Self {
        Self {
            hidden,
            input_weeks,
            horizon,
            num_queries,
            roster,
            cell: CellKind::Literal,
            query_mode: if num_queries == 0 {
                QueryMode::None
            } else {
                QueryMode::Attention
            },
            deseasonalize: true,
            country_embedding: false,
            shared_fusion: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.input_weeks == 0 || self.horizon == 0 {
            return Err(Error::Param("M, N and S must all be ≥ 1".into()));
        }
        if self.roster.is_empty() {
            return Err(Error::Param("country roster is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.roster.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(Error::Param(format!("country `{dup}` listed twice")));
        }
        match (self.query_mode, self.num_queries) {
            (QueryMode::None, 0) => Ok(()),
            (QueryMode::None, l) => Err(Error::Param(format!("query mode `none` with L={l}"))),
            (_, 0) => Err(Error::Param("query mode needs L ≥ 1".into())),
            _ => Ok(()),
        }
    }

    /// One-based id of a country, as used by the country embedding.
    pub fn country_id(&self, country: &str) -> Result<usize> {
        self.roster
            .iter()
            .position(|c| c == country)
            .map(|i| i + 1)
            .ok_or_else(|| Error::UnknownCountry(country.to_string()))
    }

    pub(crate) fn encoder_input_dim(&self) -> usize {
        match self.query_mode {
            QueryMode::Concat => 1 + self.num_queries,
            _ => 1,
        }
    }

    pub(crate) fn fusion_input_dim(&self) -> usize {
        match self.query_mode {
            QueryMode::Attention => 2 * self.hidden,
            _ => self.hidden,
        }
    }

    pub(crate) fn fusion_prefix(&self, country: &str) -> String {
        if self.shared_fusion {
            "fusion".to_string()
        } else {
            format!("country.{country}.fusion")
        }
    }
}

/// Gate maps of one GRU. `U_*` are `in × M`, `W_*` are `M × M`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub u_z: Tensor2,
    pub u_r: Tensor2,
    pub u_h: Tensor2,
    pub w_z: Tensor2,
    pub w_r: Tensor2,
    pub w_h: Tensor2,
}

impl GruParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        let u = Tensor2::zeros(input_dim, hidden);
        let w = Tensor2::zeros(hidden, hidden);
        Self {
            u_z: u.clone(),
            u_r: u.clone(),
            u_h: u,
            w_z: w.clone(),
            w_r: w.clone(),
            w_h: w,
        }
    }

    pub fn random(input_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            u_z: rng.glorot(input_dim, hidden),
            u_r: rng.glorot(input_dim, hidden),
            u_h: rng.glorot(input_dim, hidden),
            w_z: rng.glorot(hidden, hidden),
            w_r: rng.glorot(hidden, hidden),
            w_h: rng.glorot(hidden, hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_z.rows()
    }

    fn named(self) -> [(&'static str, Tensor2); 6] {
        [
            ("u_z", self.u_z),
            ("u_r", self.u_r),
            ("u_h", self.u_h),
            ("w_z", self.w_z),
            ("w_r", self.w_r),
            ("w_h", self.w_h),
        ]
    }
}

/// Query, key and value projections, each `M × M`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor2,
    pub w_k: Tensor2,
    pub w_v: Tensor2,
}

impl AttentionParams {
    pub fn random(hidden: usize, rng: &mut Rng) -> Self {
        Self {
            w_q: rng.glorot(hidden, hidden),
            w_k: rng.glorot(hidden, hidden),
            w_v: rng.glorot(hidden, hidden),
        }
    }
}

/// Two dense layers with a tanh between them: `tanh(x·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Tensor2,
    pub b1: Tensor2,
    pub w2: Tensor2,
    pub b2: Tensor2,
}

impl MlpParams {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Tensor2::zeros(input, hidden),
            b1: Tensor2::zeros(1, hidden),
            w2: Tensor2::zeros(hidden, output),
            b2: Tensor2::zeros(1, output),
        }
    }

    pub fn random(input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            w1: rng.glorot(input, hidden),
            b1: Tensor2::zeros(1, hidden),
            w2: rng.glorot(hidden, output),
            b2: Tensor2::zeros(1, output),
        }
    }

    fn named(self) -> [(&'static str, Tensor2); 4] {
        [
            ("hidden.weight", self.w1),
            ("hidden.bias", self.b1),
            ("out.weight", self.w2),
            ("out.bias", self.b2),
        ]
    }
}

/// Ordered set of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor2)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor2) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = t,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, t));
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor2> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        self.entries.iter_mut().map(|(_, t)| t).collect()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.entries.iter().map(|(_, t)| t.shape()).collect()
    }

    fn insert_group<const K: usize>(&mut self, prefix: &str, named: [(&'static str, Tensor2); K]) {
        for (n, t) in named {
            self.insert(format!("{prefix}.{n}"), t);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Learnable weights plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
}

impl ModelParams {
    fn build(
        config: ModelConfig,
        mut gen: impl FnMut(&str, usize, usize) -> Tensor2,
    ) -> Result<Self> {
        config.validate()?;
        let m = config.hidden;
        let mut store = ParamStore::default();
        let gru = |gen: &mut dyn FnMut(&str, usize, usize) -> Tensor2, name: &str, input: usize| {
            GruParams {
                u_z: gen(name, input, m),
                u_r: gen(name, input, m),
                u_h: gen(name, input, m),
                w_z: gen(name, m, m),
                w_r: gen(name, m, m),
                w_h: gen(name, m, m),
            }
        };
        let mlp = |gen: &mut dyn FnMut(&str, usize, usize) -> Tensor2, input: usize, out: usize| {
            MlpParams {
                w1: gen("weight", input, m),
                b1: Tensor2::zeros(1, m),
                w2: gen("weight", m, out),
                b2: Tensor2::zeros(1, out),
            }
        };

        store.insert_group(
            "ili_encoder",
            gru(&mut gen, "gru", config.encoder_input_dim()).named(),
        );
        if config.query_mode == QueryMode::Attention {
            store.insert_group("query_encoder", gru(&mut gen, "gru", 1).named());
        }
        store.insert_group("decoder", gru(&mut gen, "gru", 1).named());
        if config.shared_fusion {
            store.insert_group(
                "fusion",
                mlp(&mut gen, config.fusion_input_dim(), m).named(),
            );
        }
        for c in &config.roster {
            if !config.shared_fusion {
                store.insert_group(
                    &format!("country.{c}.fusion"),
                    mlp(&mut gen, config.fusion_input_dim(), m).named(),
                );
            }
            if config.query_mode == QueryMode::Attention {
                for n in ["w_q", "w_k", "w_v"] {
                    store.insert(format!("country.{c}.attention.{n}"), gen("attention", m, m));
                }
            }
            store.insert_group(&format!("country.{c}.output"), mlp(&mut gen, m, 1).named());
        }
        if config.country_embedding {
            store.insert(
                "country_embedding.weight",
                gen("embedding", config.roster.len(), m),
            );
        }
        Ok(Self { config, store })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        Self::build(config, |_, r, c| rng.glorot(r, c))
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        Self::build(config, |_, r, c| Tensor2::zeros(r, c))
    }

    pub fn gru(&self, prefix: &str) -> Result<GruParams> {
        let g = |n: &str| self.store.get(&format!("{prefix}.{n}")).cloned();
        Ok(GruParams {
            u_z: g("u_z")?,
            u_r: g("u_r")?,
            u_h: g("u_h")?,
            w_z: g("w_z")?,
            w_r: g("w_r")?,
            w_h: g("w_h")?,
        })
    }

    pub fn attention(&self, country: &str) -> Result<AttentionParams> {
        let g = |n: &str| {
            self.store
                .get(&format!("country.{country}.attention.{n}"))
                .cloned()
        };
        Ok(AttentionParams {
            w_q: g("w_q")?,
            w_k: g("w_k")?,
            w_v: g("w_v")?,
        })
    }

    pub fn mlp(&self, prefix: &str) -> Result<MlpParams> {
        let g = |n: &str| self.store.get(&format!("{prefix}.{n}")).cloned();
        Ok(MlpParams {
            w1: g("hidden.weight")?,
            b1: g("hidden.bias")?,
            w2: g("out.weight")?,
            b2: g("out.bias")?,
        })
    }

    pub fn set_gru(&mut self, prefix: &str, p: GruParams) {
        self.store.insert_group(prefix, p.named());
    }

    pub fn set_mlp(&mut self, prefix: &str, p: MlpParams) {
        self.store.insert_group(prefix, p.named());
    }

    pub fn set_attention(&mut self, country: &str, p: AttentionParams) {
        self.store
            .insert(format!("country.{country}.attention.w_q"), p.w_q);
        self.store
            .insert(format!("country.{country}.attention.w_k"), p.w_k);
        self.store
            .insert(format!("country.{country}.attention.w_v"), p.w_v);
    }

    /// True for tensors used by every country.
    pub fn is_shared(name: &str) -> bool {
        !name.starts_with("country.")
    }
}

/// Tape handles for every tensor of a [`ParamStore`], in store order.
#[derive(Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn params(tape: &mut GradTape, store: &ParamStore) -> Self {
        Self::with(tape, store, true)
    }

    pub fn constants(tape: &mut GradTape, store: &ParamStore) -> Self {
        Self::with(tape, store, false)
    }

    fn with(tape: &mut GradTape, store: &ParamStore, differentiable: bool) -> Self {
        let vars = store
            .iter()
            .map(|(_, t)| {
                if differentiable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Self {
            vars,
            index: store.index.clone(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roster() -> Vec<String> {
        vec!["US".into(), "JP".into()]
    }

    #[test]
    fn layout_attention_mode() {
        let mut cfg = ModelConfig::new(4, 8, 2, 3, roster());
        cfg.country_embedding = true;
        let p = ModelParams::init(cfg, &mut Rng::new(1)).unwrap();
        assert_eq!(p.store.get("ili_encoder.u_z").unwrap().shape(), (1, 4));
        assert_eq!(p.store.get("decoder.w_h").unwrap().shape(), (4, 4));
        assert_eq!(p.store.get("fusion.hidden.weight").unwrap().shape(), (8, 4));
        assert_eq!(
            p.store.get("country.JP.output.out.weight").unwrap().shape(),
            (4, 1)
        );
        assert_eq!(
            p.store.get("country.US.attention.w_k").unwrap().shape(),
            (4, 4)
        );
        assert_eq!(
            p.store.get("country_embedding.weight").unwrap().shape(),
            (2, 4)
        );
        assert!(p.store.get("country.US.fusion.hidden.weight").is_err());
    }

    #[test]
    fn layout_without_queries() {
        let cfg = ModelConfig::new(4, 8, 2, 0, roster());
        let p = ModelParams::init(cfg, &mut Rng::new(1)).unwrap();
        assert!(p
            .store
            .names()
            .all(|n| !n.contains("attention") && !n.starts_with("query_encoder")));
        assert_eq!(p.store.get("fusion.hidden.weight").unwrap().shape(), (4, 4));
    }

    #[test]
    fn layout_concat_and_per_country_fusion() {
        let mut cfg = ModelConfig::new(4, 8, 2, 3, roster());
        cfg.query_mode = QueryMode::Concat;
        cfg.shared_fusion = false;
        let p = ModelParams::init(cfg, &mut Rng::new(1)).unwrap();
        assert_eq!(p.store.get("ili_encoder.u_r").unwrap().shape(), (4, 4));
        assert!(p.store.contains("country.US.fusion.out.bias"));
        assert!(!p.store.contains("fusion.out.bias"));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::new(4, 8, 2, 1, vec![]).validate().is_err());
        assert!(ModelConfig::new(4, 8, 2, 1, vec!["US".into(), "US".into()])
            .validate()
            .is_err());
        let mut c = ModelConfig::new(4, 8, 2, 1, roster());
        c.query_mode = QueryMode::None;
        assert!(c.validate().is_err());
        assert_eq!(c.country_id("JP").unwrap(), 2);
        assert!(matches!(c.country_id("FR"), Err(Error::UnknownCountry(_))));
    }
}
