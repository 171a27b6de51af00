//! Reverse-mode differentiation over whole-tensor operations.
//!
//! Every operation appends one node whose value is computed eagerly. Node ids
//! increase monotonically, so the append order is already a topological order
//! and the backward pass is a single reverse sweep.

use super::tensor::{sigmoid, Tensor2};
use crate::error::{Error, Result};

/// Handle to a node on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRow(Var),
    ConcatCols(Vec<Var>),
    GroupDot(Var, Var),
    GroupMix(Var, Var),
    Select(Vec<bool>, Var, Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Gradients indexed by node id. Nodes that do not depend on any parameter
/// have no entry.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor2> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var, shape: (usize, usize)) -> Tensor2 {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor2::zeros(shape.0, shape.1))
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor2, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, t: Tensor2) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn param(&mut self, t: Tensor2) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `a + 1·bias` where `bias` is a single row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(Error::shape("add_row", ta.shape(), tb.shape()));
        }
        let cols = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let value = Tensor2::from_raw(ta.rows(), cols, data).check_finite("add_row")?;
        let rg = self.needs(&[a, bias]);
        Ok(self.push(value, Op::AddRow(a, bias), rg))
    }

    /// `scale·a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let value = self
            .value(a)
            .map(|v| scale * v + shift)
            .check_finite("affine")?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Affine(a, scale), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.needs(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.needs(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn softmax_row(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).softmax_row()?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::SoftmaxRow(a), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(first),
                    self.shape(p),
                ));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor2::from_raw(rows, cols, data);
        let rg = self.needs(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Per-group dot products: `q` is `B×M`, `k` is `(B·G)×M`; output
    /// `[b, g] = q[b] · k[b·G + g]`.
    pub fn group_dot(&mut self, q: Var, k: Var) -> Result<Var> {
        let (tq, tk) = (self.value(q), self.value(k));
        let (b, m) = tq.shape();
        if b == 0 || tk.cols() != m || tk.rows() % b != 0 {
            return Err(Error::shape("group_dot", tq.shape(), tk.shape()));
        }
        let g = tk.rows() / b;
        let mut data = vec![0.0; b * g];
        for i in 0..b {
            let qi = tq.row(i);
            for j in 0..g {
                data[i * g + j] = qi.iter().zip(tk.row(i * g + j)).map(|(x, y)| x * y).sum();
            }
        }
        let value = Tensor2::from_raw(b, g, data).check_finite("group_dot")?;
        let rg = self.needs(&[q, k]);
        Ok(self.push(value, Op::GroupDot(q, k), rg))
    }

    /// Per-group weighted sums: `w` is `B×G`, `v` is `(B·G)×M`; output
    /// `[b] = Σ_g w[b, g] · v[b·G + g]`.
    pub fn group_mix(&mut self, w: Var, v: Var) -> Result<Var> {
        let (tw, tv) = (self.value(w), self.value(v));
        let (b, g) = tw.shape();
        if tv.rows() != b * g {
            return Err(Error::shape("group_mix", tw.shape(), tv.shape()));
        }
        let m = tv.cols();
        let mut data = vec![0.0; b * m];
        for i in 0..b {
            let out = &mut data[i * m..(i + 1) * m];
            for j in 0..g {
                let wij = tw.get(i, j);
                for (o, x) in out.iter_mut().zip(tv.row(i * g + j)) {
                    *o += wij * x;
                }
            }
        }
        let value = Tensor2::from_raw(b, m, data).check_finite("group_mix")?;
        let rg = self.needs(&[w, v]);
        Ok(self.push(value, Op::GroupMix(w, v), rg))
    }

    /// Row-wise choice: row `i` comes from `a` when `mask[i]`, else from `b`.
    /// Rows are copied, never combined arithmetically.
    pub fn select_rows(&mut self, mask: Vec<bool>, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || mask.len() != ta.rows() {
            return Err(Error::shape("select_rows", ta.shape(), tb.shape()));
        }
        let mut data = Vec::with_capacity(ta.len());
        for (i, &pick_a) in mask.iter().enumerate() {
            data.extend_from_slice(if pick_a { ta.row(i) } else { tb.row(i) });
        }
        let value = Tensor2::from_raw(ta.rows(), ta.cols(), data);
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Select(mask, a, b), rg))
    }

    /// Mean of all entries as a 1×1 tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let value = Tensor2::from_raw(1, 1, vec![m]).check_finite("mean")?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Mean(a), rg))
    }

    /// Mean squared difference between two equally shaped nodes.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor2::filled(1, 1, 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor2>], v: Var, g: Tensor2) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor2, grads: &mut [Option<Tensor2>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, g.matmul(&tb.transpose())?);
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, ta.transpose().matmul(g)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let ga = g.hadamard(self.value(*b))?;
                let gb = g.hadamard(self.value(*a))?;
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                let cols = g.cols();
                let mut sums = vec![0.0; cols];
                for row in g.data().chunks(cols) {
                    for (s, v) in sums.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                self.accumulate(grads, *bias, Tensor2::from_raw(1, cols, sums));
            }
            Op::Affine(a, scale) => self.accumulate(grads, *a, g.scale(*scale)),
            Op::Sigmoid(a) => {
                let ga = g.zip_with(y, "sigmoid'", |g, s| g * s * (1.0 - s))?;
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = g.zip_with(y, "tanh'", |g, t| g * (1.0 - t * t))?;
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRow(a) => {
                let cols = y.cols();
                let mut out = vec![0.0; y.len()];
                for ((o, yr), gr) in out
                    .chunks_mut(cols)
                    .zip(y.data().chunks(cols))
                    .zip(g.data().chunks(cols))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yi), gi) in o.iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor2::from_raw(y.rows(), cols, out));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    let mut data = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        data.extend_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    offset += cols;
                    self.accumulate(grads, p, Tensor2::from_raw(rows, cols, data));
                }
            }
            Op::GroupDot(q, k) => {
                let (tq, tk) = (self.value(*q), self.value(*k));
                let (b, m) = tq.shape();
                let gs = g.cols();
                let mut dq = vec![0.0; b * m];
                let mut dk = vec![0.0; tk.len()];
                for i in 0..b {
                    for j in 0..gs {
                        let gij = g.get(i, j);
                        let krow = tk.row(i * gs + j);
                        for c in 0..m {
                            dq[i * m + c] += gij * krow[c];
                            dk[(i * gs + j) * m + c] = gij * tq.get(i, c);
                        }
                    }
                }
                self.accumulate(grads, *q, Tensor2::from_raw(b, m, dq));
                self.accumulate(grads, *k, Tensor2::from_raw(tk.rows(), m, dk));
            }
            Op::GroupMix(w, v) => {
                let (tw, tv) = (self.value(*w), self.value(*v));
                let (b, gs) = tw.shape();
                let m = tv.cols();
                let mut dw = vec![0.0; b * gs];
                let mut dv = vec![0.0; tv.len()];
                for i in 0..b {
                    let gi = g.row(i);
                    for j in 0..gs {
                        let vrow = tv.row(i * gs + j);
                        dw[i * gs + j] = gi.iter().zip(vrow).map(|(a, b)| a * b).sum();
                        let wij = tw.get(i, j);
                        for c in 0..m {
                            dv[(i * gs + j) * m + c] = wij * gi[c];
                        }
                    }
                }
                self.accumulate(grads, *w, Tensor2::from_raw(b, gs, dw));
                self.accumulate(grads, *v, Tensor2::from_raw(tv.rows(), m, dv));
            }
            Op::Select(mask, a, b) => {
                let cols = g.cols();
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for (i, &pick_a) in mask.iter().enumerate() {
                    let dst = if pick_a { &mut ga } else { &mut gb };
                    dst[i * cols..(i + 1) * cols].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, Tensor2::from_raw(g.rows(), cols, ga));
                self.accumulate(grads, *b, Tensor2::from_raw(g.rows(), cols, gb));
            }
            Op::Mean(a) => {
                let (rows, cols) = self.shape(*a);
                let scale = g.get(0, 0) / (rows * cols) as f64;
                self.accumulate(grads, *a, Tensor2::filled(rows, cols, scale));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;

    /// Central finite-difference check of d(loss)/d(input) for a tape-built
    /// function of a single input tensor.
    fn check_grad(input: &Tensor2, f: impl Fn(&mut GradTape, Var) -> Var) {
        let mut tape = GradTape::new();
        let x = tape.param(input.clone());
        let loss = f(&mut tape, x);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get_or_zeros(x, input.shape());

        let eval = |t: &Tensor2| {
            let mut tape = GradTape::new();
            let x = tape.param(t.clone());
            let l = f(&mut tape, x);
            tape.value(l).get(0, 0)
        };
        let h = 1e-5;
        for i in 0..input.len() {
            let mut plus = input.clone();
            plus.data_mut()[i] += h;
            let mut minus = input.clone();
            minus.data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            if a.abs().max(numeric.abs()) > 1e-8 {
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
                assert!(rel < 1e-4, "coord {i}: analytic {a} numeric {numeric}");
            }
        }
    }

    fn weighted_sum(tape: &mut GradTape, y: Var, seed: u64) -> Var {
        let (r, c) = tape.value(y).shape();
        let w = tape.constant(Rng::new(seed).uniform_tensor(r, c, -1.0, 1.0));
        let p = tape.mul(y, w).unwrap();
        tape.mean(p).unwrap()
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = Rng::new(3);
        let a = rng.uniform_tensor(3, 4, -1.0, 1.0);
        let other = rng.uniform_tensor(4, 2, -1.0, 1.0);
        let same = rng.uniform_tensor(3, 4, -1.0, 1.0);
        let bias = rng.uniform_tensor(1, 4, -1.0, 1.0);

        check_grad(&a, |t, x| {
            let o = t.constant(other.clone());
            let y = t.matmul(x, o).unwrap();
            weighted_sum(t, y, 1)
        });
        check_grad(&other, |t, x| {
            let o = t.constant(a.clone());
            let y = t.matmul(o, x).unwrap();
            weighted_sum(t, y, 2)
        });
        check_grad(&a, |t, x| {
            let s = t.constant(same.clone());
            let y = t.mul(x, s).unwrap();
            let y = t.add(y, x).unwrap();
            let y = t.sub(y, s).unwrap();
            weighted_sum(t, y, 3)
        });
        check_grad(&bias, |t, x| {
            let s = t.constant(same.clone());
            let y = t.add_row(s, x).unwrap();
            let y = t.tanh(y);
            weighted_sum(t, y, 4)
        });
        check_grad(&a, |t, x| {
            let y = t.sigmoid(x);
            let y = t.affine(y, -2.0, 1.0).unwrap();
            weighted_sum(t, y, 5)
        });
        check_grad(&a, |t, x| {
            let y = t.softmax_row(x).unwrap();
            weighted_sum(t, y, 6)
        });
        check_grad(&a, |t, x| {
            let s = t.constant(same.clone());
            let y = t.concat_cols(&[s, x, s]).unwrap();
            weighted_sum(t, y, 7)
        });
        check_grad(&a, |t, x| {
            let s = t.constant(same.clone());
            let y = t.select_rows(vec![true, false, true], x, s).unwrap();

            t.mse(y, s).unwrap()
        });
    }

    #[test]
    fn group_ops_gradients() {
        let mut rng = Rng::new(9);
        let q = rng.uniform_tensor(2, 3, -1.0, 1.0);
        let k = rng.uniform_tensor(6, 3, -1.0, 1.0);
        check_grad(&q, |t, x| {
            let kk = t.constant(k.clone());
            let y = t.group_dot(x, kk).unwrap();
            weighted_sum(t, y, 10)
        });
        check_grad(&k, |t, x| {
            let qq = t.constant(q.clone());
            let y = t.group_dot(qq, x).unwrap();
            weighted_sum(t, y, 11)
        });
        let w = rng.uniform_tensor(2, 3, 0.0, 1.0);
        check_grad(&w, |t, x| {
            let v = t.constant(k.clone());
            let y = t.group_mix(x, v).unwrap();
            weighted_sum(t, y, 12)
        });
        check_grad(&k, |t, x| {
            let ww = t.constant(w.clone());
            let y = t.group_mix(ww, x).unwrap();
            weighted_sum(t, y, 13)
        });
    }

    #[test]
    fn reused_node_accumulates() {
        let mut tape = GradTape::new();
        let x = tape.param(Tensor2::from_rows(&[&[3.0]]));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = GradTape::new();
        let x = tape.param(Tensor2::zeros(2, 1));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = GradTape::new();
        let c = tape.constant(Tensor2::filled(1, 1, 2.0));
        let p = tape.param(Tensor2::filled(1, 1, 5.0));
        let y = tape.mul(c, p).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[2.0]);
    }
}
