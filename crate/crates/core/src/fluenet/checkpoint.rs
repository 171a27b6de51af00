//! JSON checkpoints: model config, per-country preprocessing state and every
//! tensor, written with round-trip float formatting so a reload is bitwise
//! identical.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, ModelParams, ParamStore};
use crate::datahub::{IsoWeek, MinMax};
use crate::decompose::SeasonalTemplate;
use crate::error::{Error, Result};
use crate::numkit::Tensor2;

pub const CHECKPOINT_FORMAT: &str = "flucast-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// What a country needs at inference time besides the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryState {
    /// Last fitted seasonal cycle, extended periodically past the training data.
    pub template: SeasonalTemplate,
    /// Selected queries, in model column order.
    pub queries: Vec<String>,
    /// Min-max scaling fitted on training weeks, one per query.
    pub query_scales: Vec<MinMax>,
    /// Last week used to fit the decomposition and scalers.
    pub fit_end: IsoWeek,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub seed: u64,
    pub countries: BTreeMap<String, CountryState>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    seed: u64,
    #[serde(flatten)]
    config: ModelConfig,
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Document {
    format: String,
    version: u32,
    meta: Meta,
    countries: BTreeMap<String, CountryState>,
    tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let doc = Document {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            meta: Meta {
                seed: self.seed,
                config: self.model.config.clone(),
            },
            countries: self.countries.clone(),
            tensors: self
                .model
                .store
                .iter()
                .map(|(name, t)| NamedTensor {
                    name: name.to_string(),
                    rows: t.rows(),
                    cols: t.cols(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Parse and check that every expected tensor is present with the right shape.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Document =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unknown format `{}`",
                doc.format
            )));
        }
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {} not supported (expected {CHECKPOINT_VERSION})",
                doc.version
            )));
        }
        let config = doc.meta.config;
        let layout =
            ModelParams::zeros(config.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut loaded: BTreeMap<String, NamedTensor> = BTreeMap::new();
        for t in doc.tensors {
            if loaded.contains_key(&t.name) {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` appears twice",
                    t.name
                )));
            }
            loaded.insert(t.name.clone(), t);
        }
        let mut store = ParamStore::default();
        for (name, expected) in layout.store.iter() {
            let t = loaded
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if (t.rows, t.cols) != expected.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` is {}×{}, expected {}×{}",
                    t.rows,
                    t.cols,
                    expected.rows(),
                    expected.cols()
                )));
            }
            let tensor = Tensor2::new(t.rows, t.cols, t.data)
                .map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
            store.insert(name, tensor);
        }
        if let Some(extra) = loaded.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        for c in &config.roster {
            if let Some(state) = doc.countries.get(c) {
                if config.query_mode != super::params::QueryMode::None
                    && state.queries.len() != config.num_queries
                {
                    return Err(Error::Checkpoint(format!(
                        "{c}: {} queries stored, model expects {}",
                        state.queries.len(),
                        config.num_queries
                    )));
                }
            }
        }
        Ok(Self {
            model: ModelParams { config, store },
            seed: doc.meta.seed,
            countries: doc.countries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_json()?.as_bytes())
            .map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        std::io::Read::read_to_string(&mut BufReader::new(file), &mut text)
            .map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn country(&self, country: &str) -> Result<&CountryState> {
        self.countries
            .get(country)
            .ok_or_else(|| Error::UnknownCountry(country.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;

    fn checkpoint() -> Checkpoint {
        let mut config = ModelConfig::new(3, 4, 2, 2, vec!["US".into(), "JP".into()]);
        config.country_embedding = true;
        let model = ModelParams::init(config, &mut Rng::new(17)).unwrap();
        let state = CountryState {
            template: SeasonalTemplate {
                anchor: "2015-W10".parse().unwrap(),
                values: vec![0.1, -0.1, 1.0 / 3.0],
            },
            queries: vec!["fever".into(), "flu symptoms".into()],
            query_scales: vec![
                MinMax {
                    min: 0.0,
                    max: 87.0,
                },
                MinMax {
                    min: 3.0,
                    max: 100.0,
                },
            ],
            fit_end: "2016-W20".parse().unwrap(),
        };
        Checkpoint {
            model,
            seed: 42,
            countries: [("US".to_string(), state)].into(),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = checkpoint();
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        for ((_, a), (_, b)) in ck.model.store.iter().zip(back.model.store.iter()) {
            assert!(a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join(format!("flucast-ck-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        let ck = checkpoint();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn corrupt_documents_rejected() {
        let json = checkpoint().to_json().unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        v["tensors"].as_array_mut().unwrap().pop();
        assert!(matches!(
            Checkpoint::from_json(&v.to_string()),
            Err(Error::Checkpoint(_))
        ));

        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        v["tensors"][0]["rows"] = 7.into();
        assert!(matches!(
            Checkpoint::from_json(&v.to_string()),
            Err(Error::Checkpoint(_))
        ));

        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        v["version"] = 99.into();
        assert!(matches!(
            Checkpoint::from_json(&v.to_string()),
            Err(Error::Checkpoint(_))
        ));

        assert!(matches!(
            Checkpoint::from_json("{"),
            Err(Error::Checkpoint(_))
        ));
    }
}
