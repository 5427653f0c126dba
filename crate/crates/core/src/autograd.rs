//! Reverse-mode automatic differentiation over [`Mat`].
//!
//! A [`Tape`] records one forward pass. Parameters enter the tape borrowed
//! from a [`ParamSet`]; [`Tape::backward`] returns their gradients as a
//! [`Gradients`] buffer aligned with the parameter set. One tape is built
//! per training example so examples can be differentiated independently.

use std::borrow::Cow;

use crate::tensor::{gemm, Mat};

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }
}

/// Gradient buffer aligned with a [`ParamSet`]; untouched entries are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            grads: vec![None; params.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for `id`, materializing zeros when the parameter was unused.
    pub fn dense(&self, id: ParamId, params: &ParamSet) -> Mat {
        self.grads[id.0].clone().unwrap_or_else(|| {
            let (r, c) = params.get(id).shape();
            Mat::zeros(r, c)
        })
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    fn accumulate(&mut self, id: ParamId, g: &Mat) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Elementwise sum, in place.
    pub fn add_assign(&mut self, other: &Gradients) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_in_place(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(Mat::sq_norm)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Mat::all_finite)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a @ bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// Broadcast a `1×C` row over every row of `a`.
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// Elementwise product with a constant.
    MulConst(Var, Mat),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Mat,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    RowSum(Var),
    RowNorm(Var),
    PairwiseDist(Var, Var),
    Sum(Var),
    Mean(Var),
}

struct Node<'p> {
    value: Cow<'p, Mat>,
    op: Op,
}

const LN_EPS: f64 = 1e-5;

/// One recorded forward computation.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    params: &'p ParamSet,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            nodes: Vec::new(),
            params,
            param_vars: vec![None; params.len()],
        }
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar");
        m.get(0, 0)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Cow<'p, Mat>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Mat, op: Op) -> Var {
        self.push(Cow::Owned(value), op)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push_owned(value, Op::Leaf)
    }

    /// Parameter handle; repeated calls for the same id reuse one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(Cow::Borrowed(self.params.get(id)), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Copy of `v` through which no gradient flows.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push_owned(out, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Mat::zeros(av.rows(), bv.rows());
        gemm(1.0, av, false, bv, true, 0.0, &mut out);
        self.push_owned(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push_owned(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push_owned(out, Op::Sub(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "row broadcast shape");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        self.push_owned(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push_owned(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push_owned(out, Op::AddScalar(a))
    }

    pub fn mul_const(&mut self, a: Var, c: Mat) -> Var {
        let out = self.value(a).zip_map(&c, |x, y| x * y);
        self.push_owned(out, Op::MulConst(a, c))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push_owned(out, Op::Gelu(a))
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push_owned(out, Op::Relu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut normed = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in normed.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let out = Mat::from_fn(rows, cols, |r, c| {
            normed.get(r, c) * g.get(0, c) + b.get(0, c)
        });
        self.push_owned(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        self.push_owned(out, Op::SoftmaxRows(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).cols_range(start, len);
        self.push_owned(out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        self.push_owned(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        self.push_owned(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Rows of `a` at `idx`, in order; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select_rows(idx);
        self.push_owned(out, Op::GatherRows(a, idx.to_vec()))
    }

    /// `m×n → m×1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Mat::from_fn(av.rows(), 1, |r, _| av.row(r).iter().sum());
        self.push_owned(out, Op::RowSum(a))
    }

    /// Euclidean norm of each row, `m×n → m×1`. Subgradient 0 at the origin.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Mat::from_fn(av.rows(), 1, |r, _| {
            av.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()
        });
        self.push_owned(out, Op::RowNorm(a))
    }

    /// All-pairs Euclidean distances between rows, `m×c, n×c → m×n`.
    pub fn pairwise_dist(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "pairwise_dist width mismatch");
        let out = Mat::from_fn(av.rows(), bv.rows(), |i, j| euclid(av.row(i), bv.row(j)));
        self.push_owned(out, Op::PairwiseDist(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push_owned(Mat::filled(1, 1, s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.sum() / av.len() as f64;
        self.push_owned(Mat::filled(1, 1, s), Op::Mean(a))
    }

    /// Back-propagate from scalar `root` and collect parameter gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Mat::filled(1, 1, 1.0));
        let mut out = Gradients::zeros_like(self.params);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Mat::zeros(av.rows(), av.cols());
                    gemm(1.0, &g, false, bv, true, 0.0, &mut da);
                    let mut db = Mat::zeros(bv.rows(), bv.cols());
                    gemm(1.0, av, true, &g, false, 0.0, &mut db);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Mat::zeros(av.rows(), av.cols());
                    gemm(1.0, &g, false, bv, false, 0.0, &mut da);
                    let mut db = Mat::zeros(bv.rows(), bv.cols());
                    gemm(1.0, &g, true, av, false, 0.0, &mut db);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|v| -v));
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, v) in dr.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(&mut grads, *row, dr);
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, g.map(|v| v * s));
                }
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::MulConst(a, c) => acc(&mut grads, *a, g.zip_map(c, |x, y| x * y)),
                Op::Gelu(a) => {
                    let d = g.zip_map(self.value(*a), |gv, x| gv * gelu_grad(x));
                    acc(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let d = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normed,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let (rows, cols) = normed.shape();
                    let mut dgain = Mat::zeros(1, cols);
                    let mut dbias = Mat::zeros(1, cols);
                    let mut dx = Mat::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let (gr, nr) = (g.row(r), normed.row(r));
                        let mut mean_dn = 0.0;
                        let mut mean_dn_n = 0.0;
                        for c in 0..cols {
                            dgain.data_mut()[c] += gr[c] * nr[c];
                            dbias.data_mut()[c] += gr[c];
                            let dn = gr[c] * gv.get(0, c);
                            mean_dn += dn;
                            mean_dn_n += dn * nr[c];
                        }
                        mean_dn /= n;
                        mean_dn_n /= n;
                        let is = inv_std[r];
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            let dn = gr[c] * gv.get(0, c);
                            *d = is * (dn - mean_dn - nr[c] * mean_dn_n);
                        }
                    }
                    acc(&mut grads, *gain, dgain);
                    acc(&mut grads, *bias, dbias);
                    acc(&mut grads, *x, dx);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                            *o = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let mut d = Mat::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        acc(&mut grads, p, g.cols_range(offset, w));
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (h, w) = self.value(p).shape();
                        let d = Mat::from_vec(h, w, g.data()[offset * w..(offset + h) * w].to_vec());
                        acc(&mut grads, p, d);
                        offset += h;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let av = self.value(*a);
                    let mut d = Mat::zeros(av.rows(), av.cols());
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, v) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::RowSum(a) => {
                    let av = self.value(*a);
                    let d = Mat::from_fn(av.rows(), av.cols(), |r, _| g.get(r, 0));
                    acc(&mut grads, *a, d);
                }
                Op::RowNorm(a) => {
                    let av = self.value(*a);
                    let y = &node.value;
                    let d = Mat::from_fn(av.rows(), av.cols(), |r, c| {
                        let n = y.get(r, 0);
                        if n > 0.0 {
                            g.get(r, 0) * av.get(r, c) / n
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *a, d);
                }
                Op::PairwiseDist(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let y = &node.value;
                    let mut da = Mat::zeros(av.rows(), av.cols());
                    let mut db = Mat::zeros(bv.rows(), bv.cols());
                    for i in 0..av.rows() {
                        for j in 0..bv.rows() {
                            let dist = y.get(i, j);
                            if dist <= 0.0 {
                                continue;
                            }
                            let w = g.get(i, j) / dist;
                            if w == 0.0 {
                                continue;
                            }
                            for c in 0..av.cols() {
                                let diff = w * (av.get(i, c) - bv.get(j, c));
                                da.data_mut()[i * av.cols() + c] += diff;
                                db.data_mut()[j * bv.cols() + c] -= diff;
                            }
                        }
                    }
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(&mut grads, *a, Mat::filled(r, c, g.get(0, 0)));
                }
                Op::Mean(a) => {
                    let (r, c) = self.value(*a).shape();
                    let n = (r * c) as f64;
                    acc(&mut grads, *a, Mat::filled(r, c, g.get(0, 0) / n));
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn gelu(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}
