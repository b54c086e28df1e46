//! Minimal reverse-mode automatic differentiation over [`Tensor`].
//!
//! A `Tape` records an eager forward computation as a flat list of nodes;
//! `backward` walks it in reverse and accumulates gradients. The op set is
//! exactly what the denoiser, context pipeline, and losses need - nothing
//! more. Gradient accumulation order is fixed by node order, so results
//! are deterministic.

use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    AddScalar(VarId),
    /// (N×C) + (1×C) broadcast over rows.
    AddRow(VarId, VarId),
    /// (N×C) ⊙ (1×C) broadcast over rows.
    MulRow(VarId, VarId),
    MatMul(VarId, VarId),
    /// a · bᵀ.
    MatMulNt(VarId, VarId),
    SoftmaxRows(VarId),
    LayerNormRows(VarId),
    Gelu(VarId),
    Sigmoid(VarId),
    /// Columns `start..start+width` of the input.
    SliceCols(VarId, usize),
    ConcatCols(VarId, VarId),
    /// Rows of a table selected by index (row repeats allowed).
    GatherRows(VarId, Vec<usize>),
    /// Whole matrix stacked vertically `times` times.
    TileRows(VarId, usize),
    /// Each row repeated `times` consecutive times.
    RepeatInterleaveRows(VarId, usize),
    /// out.data[j] = in.data[idx[j]] with a fresh shape; idx may repeat.
    Reindex(VarId, Vec<usize>),
    /// Σ w ⊙ x with constant weights, producing a 1×1 scalar.
    WeightedSum(VarId, Tensor),
    ClampMax(VarId, f64),
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every tape variable.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: VarId) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, densified to the variable's shape.
    pub fn dense(&self, v: VarId, rows: usize, cols: usize) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(rows, cols),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: VarId) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "expected scalar node");
        t.data[0]
    }

    fn push(&mut self, op: Op, value: Tensor) -> VarId {
        self.nodes.push(Node { op, value });
        VarId(self.nodes.len() - 1)
    }

    /// A leaf. Whether it acts as a trainable parameter or plain data is
    /// up to the caller: gradients are computed for every leaf reached.
    pub fn input(&mut self, t: Tensor) -> VarId {
        self.push(Op::Input, t)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).add(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).sub(self.value(b));
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).mul(self.value(b));
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: VarId, s: f64) -> VarId {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn add_scalar(&mut self, a: VarId, s: f64) -> VarId {
        let v = self.value(a).map(|x| x + s);
        self.push(Op::AddScalar(a), v)
    }

    pub fn add_row(&mut self, a: VarId, row: VarId) -> VarId {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.rows, 1, "add_row expects a 1×C row");
        assert_eq!(x.cols, r.cols, "add_row width mismatch");
        let mut out = x.clone();
        for i in 0..out.rows {
            for c in 0..out.cols {
                out.data[i * out.cols + c] += r.data[c];
            }
        }
        self.push(Op::AddRow(a, row), out)
    }

    pub fn mul_row(&mut self, a: VarId, row: VarId) -> VarId {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.rows, 1, "mul_row expects a 1×C row");
        assert_eq!(x.cols, r.cols, "mul_row width mismatch");
        let mut out = x.clone();
        for i in 0..out.rows {
            for c in 0..out.cols {
                out.data[i * out.cols + c] *= r.data[c];
            }
        }
        self.push(Op::MulRow(a, row), out)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(Op::MatMulNt(a, b), v)
    }

    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            let row = x.row(i);
            let m = row.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            let mut denom = 0.0;
            for (c, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                out.data[i * x.cols + c] = e;
                denom += e;
            }
            for c in 0..x.cols {
                out.data[i * x.cols + c] /= denom;
            }
        }
        self.push(Op::SoftmaxRows(a), out)
    }

    pub fn layer_norm_rows(&mut self, a: VarId) -> VarId {
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            let row = x.row(i);
            let (mu, s) = row_norm_stats(row);
            for c in 0..x.cols {
                out.data[i * x.cols + c] = (row[c] - mu) / s;
            }
        }
        self.push(Op::LayerNormRows(a), out)
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(gelu);
        self.push(Op::Gelu(a), v)
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a), v)
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, width: usize) -> VarId {
        let x = self.value(a);
        assert!(start + width <= x.cols, "slice_cols out of range");
        let mut out = Tensor::zeros(x.rows, width);
        for i in 0..x.rows {
            let src = &x.data[i * x.cols + start..i * x.cols + start + width];
            out.data[i * width..(i + 1) * width].copy_from_slice(src);
        }
        self.push(Op::SliceCols(a, start), out)
    }

    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> VarId {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.rows, y.rows, "concat_cols row mismatch");
        let cols = x.cols + y.cols;
        let mut out = Tensor::zeros(x.rows, cols);
        for i in 0..x.rows {
            out.data[i * cols..i * cols + x.cols].copy_from_slice(x.row(i));
            out.data[i * cols + x.cols..(i + 1) * cols].copy_from_slice(y.row(i));
        }
        self.push(Op::ConcatCols(a, b), out)
    }

    pub fn gather_rows(&mut self, table: VarId, idx: &[usize]) -> VarId {
        let t = self.value(table);
        let mut out = Tensor::zeros(idx.len(), t.cols);
        for (i, &r) in idx.iter().enumerate() {
            assert!(r < t.rows, "gather_rows index out of range");
            out.data[i * t.cols..(i + 1) * t.cols].copy_from_slice(t.row(r));
        }
        self.push(Op::GatherRows(table, idx.to_vec()), out)
    }

    pub fn tile_rows(&mut self, a: VarId, times: usize) -> VarId {
        let x = self.value(a);
        let mut data = Vec::with_capacity(x.len() * times);
        for _ in 0..times {
            data.extend_from_slice(&x.data);
        }
        let out = Tensor::from_vec(x.rows * times, x.cols, data);
        self.push(Op::TileRows(a, times), out)
    }

    pub fn repeat_interleave_rows(&mut self, a: VarId, times: usize) -> VarId {
        let x = self.value(a);
        let mut data = Vec::with_capacity(x.len() * times);
        for i in 0..x.rows {
            for _ in 0..times {
                data.extend_from_slice(x.row(i));
            }
        }
        let out = Tensor::from_vec(x.rows * times, x.cols, data);
        self.push(Op::RepeatInterleaveRows(a, times), out)
    }

    pub fn reindex(&mut self, a: VarId, idx: &[usize], rows: usize, cols: usize) -> VarId {
        assert_eq!(idx.len(), rows * cols, "reindex shape mismatch");
        let x = self.value(a);
        let data: Vec<f64> = idx.iter().map(|&j| x.data[j]).collect();
        self.push(Op::Reindex(a, idx.to_vec()), Tensor::from_vec(rows, cols, data))
    }

    pub fn weighted_sum(&mut self, a: VarId, weights: Tensor) -> VarId {
        let x = self.value(a);
        assert!(x.same_shape(&weights), "weighted_sum shape mismatch");
        let s: f64 = x.data.iter().zip(&weights.data).map(|(&v, &w)| v * w).sum();
        self.push(Op::WeightedSum(a, weights), Tensor::scalar(s))
    }

    pub fn clamp_max(&mut self, a: VarId, max: f64) -> VarId {
        let v = self.value(a).map(|x| x.min(max));
        self.push(Op::ClampMax(a, max), v)
    }

    /// Backpropagate from a scalar root.
    pub fn backward(&self, root: VarId) -> Grads {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Input => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(self.value(*b));
                    let gb = g.mul(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::AddRow(a, row) => {
                    let mut gr = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gr.data[c] += g.data[r * g.cols + c];
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *row, gr);
                }
                Op::MulRow(a, row) => {
                    let x = self.value(*a);
                    let r = self.value(*row);
                    let mut ga = g.clone();
                    let mut gr = Tensor::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for c in 0..g.cols {
                            ga.data[i * g.cols + c] *= r.data[c];
                            gr.data[c] += g.data[i * g.cols + c] * x.data[i * g.cols + c];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *row, gr);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b));
                    let gb = self.value(*a).matmul_tn(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulNt(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.matmul_tn(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let mut gx = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let dot: f64 = (0..y.cols)
                            .map(|c| g.data[r * y.cols + c] * y.data[r * y.cols + c])
                            .sum();
                        for c in 0..y.cols {
                            gx.data[r * y.cols + c] =
                                y.data[r * y.cols + c] * (g.data[r * y.cols + c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::LayerNormRows(a) => {
                    let x = self.value(*a);
                    let n = x.cols as f64;
                    let mut gx = Tensor::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        let row = x.row(r);
                        let (mu, s) = row_norm_stats(row);
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mu) / s).collect();
                        let grow = &g.data[r * x.cols..(r + 1) * x.cols];
                        let mean_g: f64 = grow.iter().sum::<f64>() / n;
                        let mean_gx: f64 =
                            grow.iter().zip(&xhat).map(|(&gv, &xv)| gv * xv).sum::<f64>() / n;
                        for c in 0..x.cols {
                            gx.data[r * x.cols + c] = (grow[c] - mean_g - xhat[c] * mean_gx) / s;
                        }
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::Gelu(a) => {
                    let gx = self.value(*a).map(gelu_grad).mul(&g);
                    accumulate(&mut grads, *a, gx);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let gx = y.map(|v| v * (1.0 - v)).mul(&g);
                    accumulate(&mut grads, *a, gx);
                }
                Op::SliceCols(a, start) => {
                    let x = self.value(*a);
                    let mut gx = Tensor::zeros(x.rows, x.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gx.data[r * x.cols + start + c] += g.data[r * g.cols + c];
                        }
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::ConcatCols(a, b) => {
                    let wa = self.value(*a).cols;
                    let wb = self.value(*b).cols;
                    let mut ga = Tensor::zeros(g.rows, wa);
                    let mut gb = Tensor::zeros(g.rows, wb);
                    for r in 0..g.rows {
                        for c in 0..wa {
                            ga.data[r * wa + c] = g.data[r * g.cols + c];
                        }
                        for c in 0..wb {
                            gb.data[r * wb + c] = g.data[r * g.cols + wa + c];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::GatherRows(table, idx) => {
                    let t = self.value(*table);
                    let mut gt = Tensor::zeros(t.rows, t.cols);
                    for (i_out, &r) in idx.iter().enumerate() {
                        for c in 0..t.cols {
                            gt.data[r * t.cols + c] += g.data[i_out * t.cols + c];
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::TileRows(a, times) => {
                    let x = self.value(*a);
                    let mut gx = Tensor::zeros(x.rows, x.cols);
                    for rep in 0..*times {
                        for r in 0..x.rows {
                            for c in 0..x.cols {
                                gx.data[r * x.cols + c] +=
                                    g.data[(rep * x.rows + r) * x.cols + c];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::RepeatInterleaveRows(a, times) => {
                    let x = self.value(*a);
                    let mut gx = Tensor::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        for rep in 0..*times {
                            for c in 0..x.cols {
                                gx.data[r * x.cols + c] +=
                                    g.data[(r * times + rep) * x.cols + c];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::Reindex(a, idx) => {
                    let x = self.value(*a);
                    let mut gx = Tensor::zeros(x.rows, x.cols);
                    for (j, &src) in idx.iter().enumerate() {
                        gx.data[src] += g.data[j];
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::WeightedSum(a, w) => {
                    let gx = w.scale(g.data[0]);
                    accumulate(&mut grads, *a, gx);
                }
                Op::ClampMax(a, max) => {
                    let x = self.value(*a);
                    let gx = Tensor {
                        rows: x.rows,
                        cols: x.cols,
                        data: x
                            .data
                            .iter()
                            .zip(&g.data)
                            .map(|(&xv, &gv)| if xv <= *max { gv } else { 0.0 })
                            .collect(),
                    };
                    accumulate(&mut grads, *a, gx);
                }
            }
        }
        Grads { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: VarId, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn row_norm_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, (var + LAYER_NORM_EPS).sqrt())
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};
    use crate::rng::seeded;

    /// Finite-difference check of a scalar graph built by `build` from two
    /// leaf tensors. Returns the worst relative error over both leaves.
    fn check2(a: Tensor, b: Tensor, build: impl Fn(&mut Tape, VarId, VarId) -> VarId) -> f64 {
        let mut tape = Tape::new();
        let va = tape.input(a.clone());
        let vb = tape.input(b.clone());
        let root = build(&mut tape, va, vb);
        let grads = tape.backward(root);
        let ga = grads.dense(va, a.rows, a.cols);
        let gb = grads.dense(vb, b.rows, b.cols);

        let eval = |xa: &Tensor, xb: &Tensor| -> f64 {
            let mut t = Tape::new();
            let va = t.input(xa.clone());
            let vb = t.input(xb.clone());
            let r = build(&mut t, va, vb);
            t.scalar_value(r)
        };
        let fa = central_diff(&a, 1e-5, |x| eval(x, &b));
        let fb = central_diff(&b, 1e-5, |x| eval(&a, x));
        max_rel_err(&ga, &fa).max(max_rel_err(&gb, &fb))
    }

    fn sum_all(tape: &mut Tape, v: VarId) -> VarId {
        let t = tape.value(v);
        let w = Tensor::filled(t.rows, t.cols, 1.0);
        tape.weighted_sum(v, w)
    }

    #[test]
    fn grad_matmul_and_add_row() {
        let mut rng = seeded(1);
        let a = Tensor::randn(3, 4, 1.0, &mut rng);
        let b = Tensor::randn(4, 5, 1.0, &mut rng);
        let err = check2(a, b, |t, va, vb| {
            let y = t.matmul(va, vb);
            sum_all(t, y)
        });
        assert!(err < 1e-7, "matmul grad err {err}");
    }

    #[test]
    fn grad_softmax_layernorm_gelu_sigmoid() {
        let mut rng = seeded(2);
        let a = Tensor::randn(4, 6, 1.0, &mut rng);
        let b = Tensor::randn(4, 6, 1.0, &mut rng);
        let err = check2(a, b, |t, va, vb| {
            let s = t.softmax_rows(va);
            let n = t.layer_norm_rows(vb);
            let g = t.gelu(n);
            let m = t.mul(s, g);
            let sg = t.sigmoid(m);
            sum_all(t, sg)
        });
        assert!(err < 1e-6, "fused nonlinearity grad err {err}");
    }

    #[test]
    fn grad_structural_ops() {
        let mut rng = seeded(3);
        let a = Tensor::randn(2, 6, 1.0, &mut rng);
        let b = Tensor::randn(2, 3, 1.0, &mut rng);
        let err = check2(a, b, |t, va, vb| {
            let s = t.slice_cols(va, 1, 3);
            let c = t.concat_cols(s, vb); // 2×6
            let tiled = t.tile_rows(c, 2); // 4×6
            let rep = t.repeat_interleave_rows(vb, 2); // 4×3
            let s2 = t.slice_cols(tiled, 0, 3);
            let m = t.mul(s2, rep);
            sum_all(t, m)
        });
        assert!(err < 1e-7, "structural op grad err {err}");
    }

    #[test]
    fn grad_gather_reindex_clamp() {
        let mut rng = seeded(4);
        let table = Tensor::randn(5, 3, 1.0, &mut rng);
        let other = Tensor::randn(4, 3, 1.0, &mut rng);
        let err = check2(table, other, |t, vt, vo| {
            let g = t.gather_rows(vt, &[0, 2, 2, 4]);
            let m = t.mul(g, vo);
            let r = t.reindex(m, &[0, 5, 3, 7, 1, 1], 2, 3);
            let c = t.clamp_max(r, 0.5);
            sum_all(t, c)
        });
        assert!(err < 1e-7, "gather/reindex/clamp grad err {err}");
    }

    #[test]
    fn grad_attention_shaped_graph() {
        // A miniature one-head attention: softmax(q·kᵀ/s)·v.
        let mut rng = seeded(5);
        let x = Tensor::randn(4, 4, 1.0, &mut rng);
        let w = Tensor::randn(4, 4, 0.5, &mut rng);
        let err = check2(x, w, |t, vx, vw| {
            let q = t.matmul(vx, vw);
            let scores = t.matmul_nt(q, vx);
            let scaled = t.scale(scores, 0.5);
            let attn = t.softmax_rows(scaled);
            let out = t.matmul(attn, vx);
            sum_all(t, out)
        });
        assert!(err < 1e-6, "attention graph grad err {err}");
    }

    #[test]
    fn grad_row_broadcast_ops() {
        let mut rng = seeded(6);
        let a = Tensor::randn(5, 3, 1.0, &mut rng);
        let row = Tensor::randn(1, 3, 1.0, &mut rng);
        let err = check2(a, row, |t, va, vr| {
            let y = t.mul_row(va, vr);
            let z = t.add_row(y, vr);
            let z2 = t.add_scalar(z, 0.3);
            sum_all(t, z2)
        });
        assert!(err < 1e-7, "row broadcast grad err {err}");
    }
}
