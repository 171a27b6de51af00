use super::layers::{attention, decode, gru_fold, mlp, AttentionVars, GruVars, MlpVars, Sampling};
use super::params::{Bound, ModelConfig, ModelParams, QueryMode};
use crate::datahub::WindowSample;
use crate::error::{Error, Result};
use crate::numkit::{GradTape, Rng, Tensor2, Var};

/// Windows of one country laid out for a batched forward pass.
#[derive(Debug, Clone)]
pub struct Batch {
    pub country: String,
    /// `N` tensors of shape `B × in`.
    pub inputs: Vec<Tensor2>,
    /// `N` tensors of shape `(B·L) × 1`; empty unless queries are attended.
    pub queries: Vec<Tensor2>,
    /// Last input value per sample, `B × 1`.
    pub x_last: Tensor2,
    /// Targets in model space, `B × S`.
    pub targets: Tensor2,
}

impl Batch {
    pub fn from_windows(config: &ModelConfig, windows: &[&WindowSample]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        let country = first.country.clone();
        config.country_id(&country)?;
        let (n, s, l) = (config.input_weeks, config.horizon, config.num_queries);
        let b = windows.len();
        for w in windows {
            if w.country != country {
                return Err(Error::Contract(format!(
                    "batch mixes countries `{country}` and `{}`",
                    w.country
                )));
            }
            if w.n() != n || w.s() != s {
                return Err(Error::shape("window", (w.n(), w.s()), (n, s)));
            }
            if config.query_mode != QueryMode::None && w.queries.shape() != (n, l) {
                return Err(Error::shape("window queries", w.queries.shape(), (n, l)));
            }
        }
        let series = |w: &WindowSample| -> (Vec<f64>, Vec<f64>) {
            if config.deseasonalize {
                (w.input_deseason.clone(), w.target_deseason.clone())
            } else {
                (w.input.clone(), w.target.clone())
            }
        };
        let pairs: Vec<_> = windows.iter().map(|w| series(w)).collect();

        let width = config.encoder_input_dim();
        let inputs = (0..n)
            .map(|i| {
                let mut data = Vec::with_capacity(b * width);
                for (w, (x, _)) in windows.iter().zip(&pairs) {
                    data.push(x[i]);
                    if config.query_mode == QueryMode::Concat {
                        data.extend_from_slice(w.queries.row(i));
                    }
                }
                Tensor2::from_raw(b, width, data)
            })
            .collect();
        let queries = if config.query_mode == QueryMode::Attention {
            (0..n)
                .map(|i| {
                    let data = windows
                        .iter()
                        .flat_map(|w| w.queries.row(i).iter().copied())
                        .collect();
                    Tensor2::from_raw(b * l, 1, data)
                })
                .collect()
        } else {
            Vec::new()
        };
        let x_last = Tensor2::from_raw(b, 1, pairs.iter().map(|(x, _)| x[n - 1]).collect());
        let targets = Tensor2::from_raw(
            b,
            s,
            pairs.iter().flat_map(|(_, y)| y.iter().copied()).collect(),
        );
        Ok(Self {
            country,
            inputs,
            queries,
            x_last,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.x_last.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Model-space forecasts, `B × S`.
    pub prediction: Var,
    /// Attention weights, `B × L`.
    pub attention: Option<Var>,
}

/// Initial encoder state for `rows` sequences of `country`: the country's
/// embedding row when enabled, zeros otherwise.
fn initial_state(
    tape: &mut GradTape,
    bound: &Bound,
    config: &ModelConfig,
    country: &str,
    rows: usize,
) -> Result<Var> {
    if !config.country_embedding {
        return Ok(tape.constant(Tensor2::zeros(rows, config.hidden)));
    }
    let id = config.country_id(country)?;
    let c = config.roster.len();
    let mut onehot = Tensor2::zeros(rows, c);
    for r in 0..rows {
        onehot.set(r, id - 1, 1.0);
    }
    let onehot = tape.constant(onehot);
    let table = bound.var("country_embedding.weight")?;
    tape.matmul(onehot, table)
}

pub fn forward(
    tape: &mut GradTape,
    bound: &Bound,
    config: &ModelConfig,
    batch: &Batch,
    sampling: Sampling<'_>,
) -> Result<Forward> {
    let b = batch.len();
    let country = batch.country.as_str();

    let h0 = initial_state(tape, bound, config, country, b)?;
    let enc = GruVars::bind(bound, "ili_encoder")?;
    let xs: Vec<Var> = batch
        .inputs
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let h_tau = gru_fold(tape, &enc, config.cell, &xs, h0)?;

    let (fusion_in, weights) = if config.query_mode == QueryMode::Attention {
        let hq0 = initial_state(tape, bound, config, country, b * config.num_queries)?;
        let qenc = GruVars::bind(bound, "query_encoder")?;
        let qs: Vec<Var> = batch
            .queries
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let h_q = gru_fold(tape, &qenc, config.cell, &qs, hq0)?;
        let att = AttentionVars::bind(bound, country)?;
        let (mixed, w) = attention(tape, &att, h_tau, h_q)?;
        (tape.concat_cols(&[h_tau, mixed])?, Some(w))
    } else {
        (h_tau, None)
    };
    let fusion = MlpVars::bind(bound, &config.fusion_prefix(country))?;
    let h_enc = mlp(tape, &fusion, fusion_in)?;

    let dec = GruVars::bind(bound, "decoder")?;
    let out = MlpVars::bind(bound, &format!("country.{country}.output"))?;
    let x_last = tape.constant(batch.x_last.clone());
    let prediction = decode(
        tape,
        &dec,
        &out,
        config.cell,
        h_enc,
        x_last,
        config.horizon,
        sampling,
    )?;
    Ok(Forward {
        prediction,
        attention: weights,
    })
}

/// Training loss on one batch: MSE in model space under scheduled sampling.
/// Returns the tape, the bound parameters and the loss node.
pub fn batch_loss(
    model: &ModelParams,
    batch: &Batch,
    epsilon: f64,
    rng: &mut Rng,
) -> Result<(GradTape, Bound, Var)> {
    let mut tape = GradTape::new();
    let bound = Bound::params(&mut tape, &model.store);
    let teacher = tape.constant(batch.targets.clone());
    let sampling = Sampling::Train {
        teacher,
        epsilon,
        rng,
    };
    let fwd = forward(&mut tape, &bound, &model.config, batch, sampling)?;
    let loss = tape.mse(fwd.prediction, teacher)?;
    Ok((tape, bound, loss))
}

/// Gradient of the batch loss for every parameter, in store order.
pub fn batch_gradients(
    model: &ModelParams,
    batch: &Batch,
    epsilon: f64,
    rng: &mut Rng,
) -> Result<(f64, Vec<Tensor2>)> {
    let (loss, grads) = reached_gradients(model, batch, epsilon, rng)?;
    let dense = grads
        .into_iter()
        .zip(model.store.shapes())
        .map(|(g, (r, c))| g.unwrap_or_else(|| Tensor2::zeros(r, c)))
        .collect();
    Ok((loss, dense))
}

/// Like [`batch_gradients`], with `None` for tensors the loss does not
/// depend on (other countries' tensors in a multi-task model).
pub fn reached_gradients(
    model: &ModelParams,
    batch: &Batch,
    epsilon: f64,
    rng: &mut Rng,
) -> Result<(f64, Vec<Option<Tensor2>>)> {
    let (tape, bound, loss) = batch_loss(model, batch, epsilon, rng)?;
    let grads = tape.backward(loss)?;
    let value = tape.value(loss).get(0, 0);
    let out = bound
        .vars()
        .iter()
        .map(|&v| grads.get(v).cloned())
        .collect();
    Ok((value, out))
}

/// One window's forecast split into its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastResult {
    /// Model output (deseasonalized, or raw when the model runs on raw ILI).
    pub deseasonalized: Vec<f64>,
    /// Seasonal values added back (zeros for raw-space models).
    pub seasonal: Vec<f64>,
    /// Final ILI forecast.
    pub forecast: Vec<f64>,
    /// Attention weights over the country's queries.
    pub attention: Option<Vec<f64>>,
}

/// Inference-mode forecasts for windows of one country.
pub fn forecast_batch(
    model: &ModelParams,
    windows: &[&WindowSample],
) -> Result<Vec<ForecastResult>> {
    let config = &model.config;
    let batch = Batch::from_windows(config, windows)?;
    let mut tape = GradTape::new();
    let bound = Bound::constants(&mut tape, &model.store);
    let fwd = forward(&mut tape, &bound, config, &batch, Sampling::Inference)?;
    let pred = tape.value(fwd.prediction);
    let weights = fwd.attention.map(|w| tape.value(w).clone());
    Ok(windows
        .iter()
        .enumerate()
        .map(|(b, w)| {
            let deseasonalized = pred.row(b).to_vec();
            let seasonal = if config.deseasonalize {
                w.seasonal.clone()
            } else {
                vec![0.0; config.horizon]
            };
            let forecast = deseasonalized
                .iter()
                .zip(&seasonal)
                .map(|(d, s)| d + s)
                .collect();
            ForecastResult {
                deseasonalized,
                seasonal,
                forecast,
                attention: weights.as_ref().map(|t| t.row(b).to_vec()),
            }
        })
        .collect())
}

pub fn forecast(model: &ModelParams, sample: &WindowSample) -> Result<ForecastResult> {
    Ok(forecast_batch(model, &[sample])?.remove(0))
}

/// Model-space MSE over windows in inference mode, batching per country.
pub fn inference_mse(model: &ModelParams, windows: &[WindowSample]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Contract("no windows to score".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in windows.chunk_by(|a, b| a.country == b.country) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        let batch = Batch::from_windows(&model.config, &refs)?;
        let mut tape = GradTape::new();
        let bound = Bound::constants(&mut tape, &model.store);
        let fwd = forward(
            &mut tape,
            &bound,
            &model.config,
            &batch,
            Sampling::Inference,
        )?;
        let pred = tape.value(fwd.prediction);
        for (p, y) in pred.data().iter().zip(batch.targets.data()) {
            sum += (p - y).powi(2);
        }
        count += pred.len();
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datahub::IsoWeek;
    use crate::fluenet::layers::{attend, decode_one, encode_ili, encode_queries, fuse};
    use crate::fluenet::params::CellKind;

    fn sample(country: &str, n: usize, s: usize, l: usize, rng: &mut Rng) -> WindowSample {
        let input: Vec<f64> = (0..n).map(|_| rng.uniform(0.5, 3.0)).collect();
        let seasonal_in: Vec<f64> = (0..n).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let target: Vec<f64> = (0..s).map(|_| rng.uniform(0.5, 3.0)).collect();
        let seasonal: Vec<f64> = (0..s).map(|_| rng.uniform(-0.5, 0.5)).collect();
        WindowSample {
            country: country.into(),
            origin: IsoWeek::EPOCH.offset(n as i64),
            input_deseason: input.iter().zip(&seasonal_in).map(|(a, b)| a - b).collect(),
            input,
            queries: rng.uniform_tensor(n, l, 0.0, 1.0),
            target_deseason: target.iter().zip(&seasonal).map(|(a, b)| a - b).collect(),
            target,
            seasonal,
            next_queries: None,
        }
    }

    fn roster() -> Vec<String> {
        vec!["US".into(), "FR".into(), "JP".into()]
    }

    #[test]
    fn zero_model_forecasts_seasonal_part() {
        let model = ModelParams::zeros(ModelConfig::new(4, 6, 3, 2, roster())).unwrap();
        let mut rng = Rng::new(1);
        let w = sample("FR", 6, 3, 2, &mut rng);
        let r = forecast(&model, &w).unwrap();
        assert_eq!(r.deseasonalized, vec![0.0; 3]);
        assert_eq!(r.forecast, w.seasonal);
        assert_eq!(r.attention, Some(vec![0.5, 0.5]));
    }

    #[test]
    fn batched_forward_matches_value_api() {
        let mut rng = Rng::new(2);
        let mut config = ModelConfig::new(5, 7, 3, 3, roster());
        config.country_embedding = true;
        let model = ModelParams::init(config.clone(), &mut rng).unwrap();
        let w = sample("JP", 7, 3, 3, &mut rng);
        let got = forecast(&model, &w).unwrap();

        let h0 = model
            .store
            .get("country_embedding.weight")
            .unwrap()
            .row(2)
            .to_vec();
        let h_tau = encode_ili(
            &model.gru("ili_encoder").unwrap(),
            CellKind::Literal,
            &w.input_deseason,
            &h0,
        )
        .unwrap();
        let h_q = encode_queries(
            &model.gru("query_encoder").unwrap(),
            CellKind::Literal,
            &w.queries,
            &h0,
        )
        .unwrap();
        let (mixed, weights) = attend(&model.attention("JP").unwrap(), &h_tau, &h_q).unwrap();
        let h_enc = fuse(&model.mlp("fusion").unwrap(), &h_tau, &mixed).unwrap();
        let out = decode_one(
            &model.gru("decoder").unwrap(),
            &model.mlp("country.JP.output").unwrap(),
            CellKind::Literal,
            &h_enc,
            *w.input_deseason.last().unwrap(),
            3,
            None,
            0.0,
            &mut rng,
        )
        .unwrap();
        for (a, b) in got.deseasonalized.iter().zip(&out) {
            assert!((a - b).abs() <= 1e-12);
        }
        for (a, b) in got.attention.unwrap().iter().zip(&weights) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn batch_rows_are_independent() {
        let mut rng = Rng::new(3);
        let model = ModelParams::init(ModelConfig::new(4, 5, 2, 2, roster()), &mut rng).unwrap();
        let ws: Vec<WindowSample> = (0..4).map(|_| sample("US", 5, 2, 2, &mut rng)).collect();
        let refs: Vec<&WindowSample> = ws.iter().collect();
        let batched = forecast_batch(&model, &refs).unwrap();
        for (w, b) in ws.iter().zip(&batched) {
            let single = forecast(&model, w).unwrap();
            for (x, y) in single.forecast.iter().zip(&b.forecast) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn query_permutation_permutes_weights() {
        let mut rng = Rng::new(4);
        let model = ModelParams::init(ModelConfig::new(4, 6, 2, 3, roster()), &mut rng).unwrap();
        let w = sample("US", 6, 2, 3, &mut rng);
        let perm = [2usize, 0, 1];
        let mut p = w.clone();
        for i in 0..6 {
            for (j, &src) in perm.iter().enumerate() {
                p.queries.set(i, j, w.queries.get(i, src));
            }
        }
        let a = forecast(&model, &w).unwrap();
        let b = forecast(&model, &p).unwrap();
        let (wa, wb) = (a.attention.unwrap(), b.attention.unwrap());
        for (j, &src) in perm.iter().enumerate() {
            assert!((wb[j] - wa[src]).abs() <= 1e-12);
        }
        for (x, y) in a.forecast.iter().zip(&b.forecast) {
            assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let mut rng = Rng::new(5);
        let mut config = ModelConfig::new(4, 6, 3, 2, roster());
        config.country_embedding = true;
        let model = ModelParams::init(config, &mut rng).unwrap();
        let ws: Vec<WindowSample> = (0..3).map(|_| sample("FR", 6, 3, 2, &mut rng)).collect();
        let refs: Vec<&WindowSample> = ws.iter().collect();
        let batch = Batch::from_windows(&model.config, &refs).unwrap();
        let (_, grads) = batch_gradients(&model, &batch, 0.5, &mut Rng::new(9)).unwrap();
        for ((name, _), g) in model.store.iter().zip(&grads) {
            let touched = name.starts_with("country.FR.") || ModelParams::is_shared(name);
            let norm: f64 = g.data().iter().map(|v| v.abs()).sum();
            if name == "country_embedding.weight" {
                assert!(g.row(1).iter().any(|v| *v != 0.0));
                assert!(g.row(0).iter().chain(g.row(2)).all(|v| *v == 0.0));
            } else if touched {
                assert!(norm > 0.0, "{name} has zero gradient");
            } else {
                assert_eq!(norm, 0.0, "{name}");
            }
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = Rng::new(6);
        let mut config = ModelConfig::new(4, 8, 2, 2, roster());
        config.country_embedding = true;
        let mut model = ModelParams::init(config, &mut rng).unwrap();
        for t in model.store.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.uniform(-0.1, 0.1);
            }
        }
        let ws: Vec<WindowSample> = (0..3).map(|_| sample("US", 8, 2, 2, &mut rng)).collect();
        let refs: Vec<&WindowSample> = ws.iter().collect();
        let batch = Batch::from_windows(&model.config, &refs).unwrap();
        let loss_at = |m: &ModelParams| {
            let (tape, _, loss) = batch_loss(m, &batch, 0.5, &mut Rng::new(11)).unwrap();
            tape.value(loss).get(0, 0)
        };
        let (_, grads) = batch_gradients(&model, &batch, 0.5, &mut Rng::new(11)).unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for (k, g) in grads.iter().enumerate() {
            for i in 0..g.len() {
                let orig = model.store.tensors_mut()[k].data()[i];
                model.store.tensors_mut()[k].data_mut()[i] = orig + h;
                let up = loss_at(&model);
                model.store.tensors_mut()[k].data_mut()[i] = orig - h;
                let down = loss_at(&model);
                model.store.tensors_mut()[k].data_mut()[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = g.data()[i];
                if an.abs() > 1e-6 {
                    assert!(
                        ((fd - an) / an).abs() < 1e-4,
                        "param {k}[{i}]: fd {fd} vs {an}"
                    );
                    checked += 1;
                } else {
                    assert!(fd.abs() < 1e-6);
                }
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn concat_and_raw_modes_run() {
        let mut rng = Rng::new(7);
        let mut config = ModelConfig::new(3, 5, 2, 2, roster());
        config.query_mode = QueryMode::Concat;
        config.deseasonalize = false;
        let model = ModelParams::init(config, &mut rng).unwrap();
        assert!(!model.store.contains("query_encoder.u_z"));
        assert_eq!(model.store.get("ili_encoder.u_z").unwrap().shape(), (3, 3));
        let w = sample("US", 5, 2, 2, &mut rng);
        let r = forecast(&model, &w).unwrap();
        assert_eq!(r.seasonal, vec![0.0; 2]);
        assert_eq!(r.forecast, r.deseasonalized);
        assert!(r.attention.is_none());
    }

    #[test]
    fn batch_rejects_mixed_countries() {
        let mut rng = Rng::new(8);
        let config = ModelConfig::new(3, 5, 2, 2, roster());
        let a = sample("US", 5, 2, 2, &mut rng);
        let b = sample("FR", 5, 2, 2, &mut rng);
        assert!(Batch::from_windows(&config, &[&a, &b]).is_err());
        let c = sample("DE", 5, 2, 2, &mut rng);
        assert!(matches!(
            Batch::from_windows(&config, &[&c]),
            Err(Error::UnknownCountry(_))
        ));
    }
}
