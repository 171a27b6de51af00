//! Building blocks on the tape plus single-sample value-level wrappers.
//!
//! Tensors are batched along rows: a hidden state is `B × M`, a recurrent
//! input is `B × in`. Query encodings are stacked `(B·L) × M`, with the `L`
//! queries of sample `b` in rows `b·L .. (b+1)·L`.

use super::params::{AttentionParams, Bound, CellKind, GruParams, MlpParams};
use crate::error::{Error, Result};
use crate::numkit::{GradTape, Rng, Tensor2, Var};

#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
}

impl GruVars {
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        let v = |n: &str| bound.var(&format!("{prefix}.{n}"));
        Ok(Self {
            u_z: v("u_z")?,
            u_r: v("u_r")?,
            u_h: v("u_h")?,
            w_z: v("w_z")?,
            w_r: v("w_r")?,
            w_h: v("w_h")?,
        })
    }

    pub fn constants(tape: &mut GradTape, p: &GruParams) -> Self {
        Self {
            u_z: tape.constant(p.u_z.clone()),
            u_r: tape.constant(p.u_r.clone()),
            u_h: tape.constant(p.u_h.clone()),
            w_z: tape.constant(p.w_z.clone()),
            w_r: tape.constant(p.w_r.clone()),
            w_h: tape.constant(p.w_h.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

impl AttentionVars {
    pub fn bind(bound: &Bound, country: &str) -> Result<Self> {
        let v = |n: &str| bound.var(&format!("country.{country}.attention.{n}"));
        Ok(Self {
            w_q: v("w_q")?,
            w_k: v("w_k")?,
            w_v: v("w_v")?,
        })
    }

    pub fn constants(tape: &mut GradTape, p: &AttentionParams) -> Self {
        Self {
            w_q: tape.constant(p.w_q.clone()),
            w_k: tape.constant(p.w_k.clone()),
            w_v: tape.constant(p.w_v.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl MlpVars {
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        let v = |n: &str| bound.var(&format!("{prefix}.{n}"));
        Ok(Self {
            w1: v("hidden.weight")?,
            b1: v("hidden.bias")?,
            w2: v("out.weight")?,
            b2: v("out.bias")?,
        })
    }

    pub fn constants(tape: &mut GradTape, p: &MlpParams) -> Self {
        Self {
            w1: tape.constant(p.w1.clone()),
            b1: tape.constant(p.b1.clone()),
            w2: tape.constant(p.w2.clone()),
            b2: tape.constant(p.b2.clone()),
        }
    }
}

/// One GRU step.
///
/// `r = σ(x·U_r + h·W_r)`, `z = σ(x·U_z + h·W_z)`, candidate `f` per
/// [`CellKind`], `h' = (1 − z) ⊙ h + z ⊙ f`.
pub fn gru_step(tape: &mut GradTape, g: &GruVars, cell: CellKind, x: Var, h: Var) -> Result<Var> {
    let xr = tape.matmul(x, g.u_r)?;
    let hr = tape.matmul(h, g.w_r)?;
    let r_pre = tape.add(xr, hr)?;
    let r = tape.sigmoid(r_pre);

    let xz = tape.matmul(x, g.u_z)?;
    let hz = tape.matmul(h, g.w_z)?;
    let z_pre = tape.add(xz, hz)?;
    let z = tape.sigmoid(z_pre);

    let xh = tape.matmul(x, g.u_h)?;
    let recur = match cell {
        CellKind::Literal => {
            let rw = tape.matmul(r, g.w_h)?;
            tape.mul(h, rw)?
        }
        CellKind::Standard => {
            let rh = tape.mul(r, h)?;
            tape.matmul(rh, g.w_h)?
        }
    };
    let f_pre = tape.add(xh, recur)?;
    let f = tape.tanh(f_pre);

    let keep = tape.affine(z, -1.0, 1.0)?;
    let old = tape.mul(keep, h)?;
    let new = tape.mul(z, f)?;
    tape.add(old, new)
}

/// Fold the cell over `inputs` from `h0`; returns the last state.
pub fn gru_fold(
    tape: &mut GradTape,
    g: &GruVars,
    cell: CellKind,
    inputs: &[Var],
    h0: Var,
) -> Result<Var> {
    if inputs.is_empty() {
        return Err(Error::Contract(
            "GRU encoder needs at least one input step".into(),
        ));
    }
    inputs
        .iter()
        .try_fold(h0, |h, &x| gru_step(tape, g, cell, x, h))
}

/// Dot-product attention of each ILI encoding over its sample's `L` query
/// encodings. Returns the attended representation (`B × M`) and the weights
/// (`B × L`). Logits are not scaled.
pub fn attention(
    tape: &mut GradTape,
    a: &AttentionVars,
    h_tau: Var,
    h_q: Var,
) -> Result<(Var, Var)> {
    let s_q = tape.matmul(h_tau, a.w_q)?;
    let s_k = tape.matmul(h_q, a.w_k)?;
    let s_v = tape.matmul(h_q, a.w_v)?;
    let logits = tape.group_dot(s_q, s_k)?;
    let weights = tape.softmax_row(logits)?;
    let mixed = tape.group_mix(weights, s_v)?;
    Ok((mixed, weights))
}

pub fn mlp(tape: &mut GradTape, p: &MlpVars, x: Var) -> Result<Var> {
    let a = tape.matmul(x, p.w1)?;
    let a = tape.add_row(a, p.b1)?;
    let a = tape.tanh(a);
    let o = tape.matmul(a, p.w2)?;
    tape.add_row(o, p.b2)
}

/// Scheduled-sampling policy for one decoder rollout.
pub enum Sampling<'a> {
    /// Always feed back the model's own output.
    Inference,
    /// Feed teacher values (`B × S`) with probability `epsilon` per sample and step.
    Train {
        teacher: Var,
        epsilon: f64,
        rng: &'a mut Rng,
    },
}

/// GRU decoder with output MLP. Returns `B × S` forecasts.
///
/// Step 1 reads `x_last` with state `h_enc`. Step `i ≥ 2` reads either the
/// teacher value for step `i − 1` or the previous forecast.
#[allow(clippy::too_many_arguments)]
pub fn decode(
    tape: &mut GradTape,
    g: &GruVars,
    out: &MlpVars,
    cell: CellKind,
    h_enc: Var,
    x_last: Var,
    steps: usize,
    mut sampling: Sampling<'_>,
) -> Result<Var> {
    if steps == 0 {
        return Err(Error::Contract("decoder horizon must be ≥ 1".into()));
    }
    let batch = tape.value(h_enc).rows();
    if let Sampling::Train {
        teacher, epsilon, ..
    } = &sampling
    {
        if !(0.0..=1.0).contains(epsilon) {
            return Err(Error::Param(format!(
                "sampling probability {epsilon} outside [0, 1]"
            )));
        }
        if tape.value(*teacher).shape() != (batch, steps) {
            return Err(Error::shape(
                "decode teacher",
                tape.value(*teacher).shape(),
                (batch, steps),
            ));
        }
    }

    let mut h = gru_step(tape, g, cell, x_last, h_enc)?;
    let mut prev = mlp(tape, out, h)?;
    let mut outputs = vec![prev];
    for i in 1..steps {
        let input = match &mut sampling {
            Sampling::Inference => prev,
            Sampling::Train {
                teacher,
                epsilon,
                rng,
            } => {
                let mask: Vec<bool> = (0..batch).map(|_| rng.bernoulli(*epsilon)).collect();
                let col = tape.value(*teacher);
                let truth =
                    Tensor2::from_raw(batch, 1, (0..batch).map(|b| col.get(b, i - 1)).collect());
                let truth = tape.constant(truth);
                tape.select_rows(mask, truth, prev)?
            }
        };
        h = gru_step(tape, g, cell, input, h)?;
        prev = mlp(tape, out, h)?;
        outputs.push(prev);
    }
    tape.concat_cols(&outputs)
}

// ---- single-sample value-level API ----

fn row_input(tape: &mut GradTape, v: &[f64]) -> Var {
    tape.constant(Tensor2::row_vector(v))
}

/// One GRU step on plain tensors (`x`: `B × in`, `h`: `B × M`).
pub fn gru_cell(
    params: &GruParams,
    cell: CellKind,
    x: &Tensor2,
    h_prev: &Tensor2,
) -> Result<Tensor2> {
    let mut tape = GradTape::new();
    let g = GruVars::constants(&mut tape, params);
    let x = tape.constant(x.clone());
    let h = tape.constant(h_prev.clone());
    let out = gru_step(&mut tape, &g, cell, x, h)?;
    Ok(tape.value(out).clone())
}

/// Final hidden state after reading `x` (one scalar per week) from `h0`.
pub fn encode_ili(params: &GruParams, cell: CellKind, x: &[f64], h0: &[f64]) -> Result<Vec<f64>> {
    let mut tape = GradTape::new();
    let g = GruVars::constants(&mut tape, params);
    let inputs: Vec<Var> = x
        .iter()
        .map(|&v| tape.constant(Tensor2::filled(1, 1, v)))
        .collect();
    let h0 = row_input(&mut tape, h0);
    let h = gru_fold(&mut tape, &g, cell, &inputs, h0)?;
    Ok(tape.value(h).data().to_vec())
}

/// Encode each column of `q` (`N × L`) independently with shared weights.
/// Returns `L × M`.
pub fn encode_queries(
    params: &GruParams,
    cell: CellKind,
    q: &Tensor2,
    h0: &[f64],
) -> Result<Tensor2> {
    let (n, l) = q.shape();
    if l == 0 {
        return Err(Error::Contract("no queries to encode".into()));
    }
    let mut tape = GradTape::new();
    let g = GruVars::constants(&mut tape, params);
    let inputs: Vec<Var> = (0..n)
        .map(|i| tape.constant(Tensor2::column_vector(q.row(i))))
        .collect();
    let h0 = tape.constant(Tensor2::from_raw(l, h0.len(), h0.repeat(l)));
    let h = gru_fold(&mut tape, &g, cell, &inputs, h0)?;
    Ok(tape.value(h).clone())
}

/// Attention of one ILI encoding over `L` query encodings. Returns the
/// attended vector and the `L` weights.
pub fn attend(att: &AttentionParams, h_tau: &[f64], h_q: &Tensor2) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = GradTape::new();
    let a = AttentionVars::constants(&mut tape, att);
    let ht = row_input(&mut tape, h_tau);
    let hq = tape.constant(h_q.clone());
    let (mixed, w) = attention(&mut tape, &a, ht, hq)?;
    Ok((
        tape.value(mixed).data().to_vec(),
        tape.value(w).data().to_vec(),
    ))
}

/// Fusion MLP on the concatenation `[h_tau, h_tau_q]`.
pub fn fuse(params: &MlpParams, h_tau: &[f64], h_tau_q: &[f64]) -> Result<Vec<f64>> {
    let mut tape = GradTape::new();
    let p = MlpVars::constants(&mut tape, params);
    let joined: Vec<f64> = h_tau.iter().chain(h_tau_q).copied().collect();
    let x = row_input(&mut tape, &joined);
    let y = mlp(&mut tape, &p, x)?;
    Ok(tape.value(y).data().to_vec())
}

/// Single-sample decoder rollout. `teacher` is required when `epsilon > 0`.
#[allow(clippy::too_many_arguments)]
pub fn decode_one(
    decoder: &GruParams,
    output: &MlpParams,
    cell: CellKind,
    h_enc: &[f64],
    x_last: f64,
    steps: usize,
    teacher: Option<&[f64]>,
    epsilon: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let mut tape = GradTape::new();
    let g = GruVars::constants(&mut tape, decoder);
    let o = MlpVars::constants(&mut tape, output);
    let h = row_input(&mut tape, h_enc);
    let x = tape.constant(Tensor2::filled(1, 1, x_last));
    let sampling = match teacher {
        Some(t) => Sampling::Train {
            teacher: row_input(&mut tape, t),
            epsilon,
            rng,
        },
        None if epsilon > 0.0 => {
            return Err(Error::Contract(
                "scheduled sampling with ε > 0 needs teacher values".into(),
            ))
        }
        None => Sampling::Inference,
    };
    let y = decode(&mut tape, &g, &o, cell, h, x, steps, sampling)?;
    Ok(tape.value(y).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::sigmoid;

    /// Scalar transcription of the gate equations.
    fn gru_oracle(p: &GruParams, x: f64, h: &[f64]) -> Vec<f64> {
        let m = h.len();
        let dot_col =
            |w: &Tensor2, v: &[f64], j: usize| (0..m).map(|i| v[i] * w.get(i, j)).sum::<f64>();
        let r: Vec<f64> = (0..m)
            .map(|j| sigmoid(x * p.u_r.get(0, j) + dot_col(&p.w_r, h, j)))
            .collect();
        let z: Vec<f64> = (0..m)
            .map(|j| sigmoid(x * p.u_z.get(0, j) + dot_col(&p.w_z, h, j)))
            .collect();
        let f: Vec<f64> = (0..m)
            .map(|j| (x * p.u_h.get(0, j) + h[j] * dot_col(&p.w_h, &r, j)).tanh())
            .collect();
        (0..m).map(|j| (1.0 - z[j]) * h[j] + z[j] * f[j]).collect()
    }

    #[test]
    fn zero_params_halve_state() {
        let p = GruParams::zeros(1, 3);
        let h = Tensor2::row_vector(&[1.0, -2.0, 0.5]);
        let out = gru_cell(&p, CellKind::Literal, &Tensor2::filled(1, 1, 7.0), &h).unwrap();
        assert_eq!(out.data(), &[0.5, -1.0, 0.25]);
        let out = gru_cell(
            &p,
            CellKind::Literal,
            &Tensor2::filled(1, 1, 7.0),
            &Tensor2::zeros(1, 3),
        )
        .unwrap();
        assert_eq!(out.data(), &[0.0; 3]);
    }

    #[test]
    fn cell_matches_scalar_oracle() {
        let mut rng = Rng::new(21);
        for _ in 0..10 {
            let p = GruParams::random(1, 3, &mut rng);
            let h: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let x = rng.uniform(-2.0, 2.0);
            let got = gru_cell(
                &p,
                CellKind::Literal,
                &Tensor2::filled(1, 1, x),
                &Tensor2::row_vector(&h),
            )
            .unwrap();
            let want = gru_oracle(&p, x, &h);
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn standard_cell_differs() {
        let mut rng = Rng::new(3);
        let p = GruParams::random(1, 3, &mut rng);
        let h = Tensor2::row_vector(&[0.3, -0.2, 0.9]);
        let x = Tensor2::filled(1, 1, 0.4);
        let a = gru_cell(&p, CellKind::Literal, &x, &h).unwrap();
        let b = gru_cell(&p, CellKind::Standard, &x, &h).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn encode_rejects_empty() {
        let p = GruParams::zeros(1, 2);
        assert!(matches!(
            encode_ili(&p, CellKind::Literal, &[], &[0.0, 0.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn query_columns_encoded_independently() {
        let mut rng = Rng::new(4);
        let p = GruParams::random(1, 3, &mut rng);
        let q = Tensor2::from_rows(&[&[0.1, 0.9], &[0.5, 0.2], &[0.3, 0.4]]);
        let h0 = [0.1, 0.0, -0.1];
        let hq = encode_queries(&p, CellKind::Literal, &q, &h0).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = (0..3).map(|i| q.get(i, j)).collect();
            let single = encode_ili(&p, CellKind::Literal, &col, &h0).unwrap();
            assert_eq!(hq.row(j), &single[..]);
        }
    }

    /// Explicit softmax/dot-product formula.
    fn attend_oracle(a: &AttentionParams, h: &[f64], hq: &Tensor2) -> (Vec<f64>, Vec<f64>) {
        let ht = Tensor2::row_vector(h);
        let sq = ht.matmul(&a.w_q).unwrap();
        let sk = hq.matmul(&a.w_k).unwrap();
        let sv = hq.matmul(&a.w_v).unwrap();
        let l = hq.rows();
        let logits: Vec<f64> = (0..l)
            .map(|j| sq.row(0).iter().zip(sk.row(j)).map(|(x, y)| x * y).sum())
            .collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        let w: Vec<f64> = e.iter().map(|v| v / s).collect();
        let m = sv.cols();
        let out = (0..m)
            .map(|c| (0..l).map(|j| w[j] * sv.get(j, c)).sum())
            .collect();
        (out, w)
    }

    #[test]
    fn attention_examples() {
        let mut rng = Rng::new(8);
        let a = AttentionParams::random(3, &mut rng);
        let h = [0.2, -0.4, 0.7];

        let one = Tensor2::from_rows(&[&[0.5, 0.1, -0.3]]);
        let (mixed, w) = attend(&a, &h, &one).unwrap();
        assert_eq!(w, vec![1.0]);
        let sv = one.matmul(&a.w_v).unwrap();
        assert_eq!(mixed, sv.row(0));

        let twin = Tensor2::from_rows(&[&[0.5, 0.1, -0.3], &[0.5, 0.1, -0.3]]);
        let (_, w) = attend(&a, &h, &twin).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);

        let three = rng.uniform_tensor(3, 3, -1.0, 1.0);
        let (mixed, w) = attend(&a, &h, &three).unwrap();
        let (om, ow) = attend_oracle(&a, &h, &three);
        for (x, y) in mixed.iter().zip(&om).chain(w.iter().zip(&ow)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn fuse_output_width() {
        let mut rng = Rng::new(2);
        let p = MlpParams::random(6, 3, 3, &mut rng);
        assert_eq!(fuse(&p, &[0.1; 3], &[0.2; 3]).unwrap().len(), 3);
        let z = MlpParams::zeros(6, 3, 3);
        assert_eq!(fuse(&z, &[0.1; 3], &[0.2; 3]).unwrap(), vec![0.0; 3]);
    }

    fn decoder_fixture(seed: u64) -> (GruParams, MlpParams, Vec<f64>) {
        let mut rng = Rng::new(seed);
        let g = GruParams::random(1, 4, &mut rng);
        let mut o = MlpParams::random(4, 4, 1, &mut rng);
        o.b2 = Tensor2::filled(1, 1, 0.3);
        let h: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        (g, o, h)
    }

    #[test]
    fn teacher_forcing_matches_manual_rollout() {
        let (g, o, h_enc) = decoder_fixture(5);
        let teacher = [0.4, -0.2, 0.8, 0.1];
        let got = decode_one(
            &g,
            &o,
            CellKind::Literal,
            &h_enc,
            0.7,
            4,
            Some(&teacher),
            1.0,
            &mut Rng::new(0),
        )
        .unwrap();

        let mut h = Tensor2::row_vector(&h_enc);
        let mut manual = Vec::new();
        for i in 0..4 {
            let x = if i == 0 { 0.7 } else { teacher[i - 1] };
            h = gru_cell(&g, CellKind::Literal, &Tensor2::filled(1, 1, x), &h).unwrap();
            let hidden = h.matmul(&o.w1).unwrap().add(&o.b1).unwrap().map(f64::tanh);
            manual.push(hidden.matmul(&o.w2).unwrap().get(0, 0) + o.b2.get(0, 0));
        }
        for (a, b) in got.iter().zip(&manual) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_epsilon_ignores_teacher() {
        let (g, o, h_enc) = decoder_fixture(6);
        let a = decode_one(
            &g,
            &o,
            CellKind::Literal,
            &h_enc,
            0.7,
            4,
            Some(&[1.0, 2.0, 3.0, 4.0]),
            0.0,
            &mut Rng::new(1),
        )
        .unwrap();
        let b = decode_one(
            &g,
            &o,
            CellKind::Literal,
            &h_enc,
            0.7,
            4,
            Some(&[-9.0, 0.0, 5.0, 1e3]),
            0.0,
            &mut Rng::new(2),
        )
        .unwrap();
        let c = decode_one(
            &g,
            &o,
            CellKind::Literal,
            &h_enc,
            0.7,
            4,
            None,
            0.0,
            &mut Rng::new(3),
        )
        .unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.iter().zip(&c).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn single_step_uses_only_first_input() {
        let (g, o, h_enc) = decoder_fixture(7);
        let a = decode_one(
            &g,
            &o,
            CellKind::Literal,
            &h_enc,
            0.7,
            1,
            Some(&[5.0]),
            1.0,
            &mut Rng::new(1),
        )
        .unwrap();
        let b = decode_one(
            &g,
            &o,
            CellKind::Literal,
            &h_enc,
            0.7,
            1,
            None,
            0.0,
            &mut Rng::new(1),
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1);
    }

    #[test]
    fn epsilon_without_teacher_is_an_error() {
        let (g, o, h_enc) = decoder_fixture(8);
        assert!(matches!(
            decode_one(
                &g,
                &o,
                CellKind::Literal,
                &h_enc,
                0.7,
                3,
                None,
                0.5,
                &mut Rng::new(1)
            ),
            Err(Error::Contract(_))
        ));
    }
}
