//! Row-major matrices, a named parameter store, and a reverse-mode tape.
//!
//! Everything is two-dimensional: one training example is one tape, and a
//! batch gradient is the ordered sum of per-example [`Grads`]. That keeps
//! every op a plain matrix op and makes training bit-deterministic.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "Mat::from_vec shape mismatch");
        Self { rows, cols, data }
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Self {
        Self::from_vec(rows, cols, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn row_vector(data: Vec<T>) -> Self {
        let n = data.len();
        Self::from_vec(1, n, data)
    }

    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Self::from_vec(rows, cols, data)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        Self::from_vec(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_inplace(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Mat<U> {
        Mat::from_vec(
            self.rows,
            self.cols,
            self.data
                .iter()
                .map(|v| U::of(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        )
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Self {
        let mut out = Self::zeros(self.rows, other.cols);
        gemm_into(&mut out, self, false, other, false, T::one(), T::zero());
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Self {
        let mut out = Self::zeros(self.rows, other.rows);
        gemm_into(&mut out, self, false, other, true, T::one(), T::zero());
        out
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Self) -> Self {
        let mut out = Self::zeros(self.cols, other.cols);
        gemm_into(&mut out, self, true, other, false, T::one(), T::zero());
        out
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.cols, "slice_cols out of range");
        let mut out = Self::zeros(self.rows, len);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + len]);
        }
        out
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.rows, "slice_rows out of range");
        Self::from_vec(
            len,
            self.cols,
            self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        )
    }
}

/// `c = alpha * op(a) · op(b) + beta * c`.
fn gemm_into<T: Scalar>(
    c: &mut Mat<T>,
    a: &Mat<T>,
    ta: bool,
    b: &Mat<T>,
    tb: bool,
    alpha: T,
    beta: T,
) {
    let (m, k) = if ta {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let (k2, n) = if tb {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    assert_eq!(k, k2, "matmul inner dimension mismatch");
    assert_eq!((c.rows, c.cols), (m, n), "matmul output shape mismatch");
    let (rsa, csa) = if ta {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if tb {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    if k == 0 {
        c.scale_inplace(beta);
        return;
    }
    T::gemm(
        m,
        k,
        n,
        alpha,
        &a.data,
        rsa,
        csa,
        &b.data,
        rsb,
        csb,
        beta,
        &mut c.data,
        c.cols as isize,
        1,
    );
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named learnable tensors in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Mat<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Mat::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Per-parameter gradients, indexed like the owning [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads<T> {
    pub grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn new(n: usize) -> Self {
        Self {
            grads: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Mat<T>) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_inplace(s);
        }
    }

    pub fn global_norm(&self) -> T {
        self.grads
            .iter()
            .flatten()
            .map(Mat::sum_sq)
            .sum::<T>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Mat::all_finite)
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    /// `x * (1 + scale) + shift`; row `r` of `x` uses row `owner[r]`.
    Modulate {
        x: Var,
        shift: Var,
        scale: Var,
        owner: Vec<usize>,
    },
    /// `x + gate * y`; row `r` of `x` uses gate row `owner[r]`.
    GatedAdd {
        x: Var,
        gate: Var,
        y: Var,
        owner: Vec<usize>,
    },
    Attention(Box<AttentionTape<T>>),
    Scale(Var, T),
    Silu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    RmsNorm {
        x: Var,
        inv_rms: Vec<T>,
    },
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    MeanSquaredError(Var, Var),
}

struct Node<T> {
    value: Option<Mat<T>>,
    op: Op<T>,
}

/// A single-use reverse-mode tape over a borrowed parameter store.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        match (&self.nodes[v.0].value, &self.nodes[v.0].op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => &self.params.values[*id],
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn constant(&mut self, m: Mat<T>) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id.0),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_nt(self.value(b));
        self.push(out, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1 × cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let xv = self.value(x);
        let rv = self.value(row);
        assert_eq!((rv.rows, rv.cols), (1, xv.cols), "add_row shape mismatch");
        let mut out = xv.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x, row))
    }

    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Var {
        let owner = vec![0; self.value(x).rows];
        self.modulate_rows(x, shift, scale, &owner)
    }

    /// Per-row modulation where `shift`/`scale` hold one row per owner.
    pub fn modulate_rows(&mut self, x: Var, shift: Var, scale: Var, owner: &[usize]) -> Var {
        let xv = self.value(x);
        let sh = self.value(shift);
        let sc = self.value(scale);
        assert_eq!(owner.len(), xv.rows, "modulate owner length");
        assert_eq!(sh.cols, xv.cols, "modulate shift shape");
        assert_eq!(sc.shape(), sh.shape(), "modulate scale shape");
        let mut out = xv.clone();
        for (r, &o) in owner.iter().enumerate() {
            for ((v, &a), &b) in out.row_mut(r).iter_mut().zip(sc.row(o)).zip(sh.row(o)) {
                *v = *v * (T::one() + a) + b;
            }
        }
        self.push(
            out,
            Op::Modulate {
                x,
                shift,
                scale,
                owner: owner.to_vec(),
            },
        )
    }

    pub fn gated_add(&mut self, x: Var, gate: Var, y: Var) -> Var {
        let owner = vec![0; self.value(x).rows];
        self.gated_add_rows(x, gate, y, &owner)
    }

    pub fn gated_add_rows(&mut self, x: Var, gate: Var, y: Var, owner: &[usize]) -> Var {
        let xv = self.value(x);
        let gv = self.value(gate);
        let yv = self.value(y);
        assert_eq!(xv.shape(), yv.shape(), "gated_add shape mismatch");
        assert_eq!(owner.len(), xv.rows, "gated_add owner length");
        assert_eq!(gv.cols, xv.cols, "gated_add gate shape");
        let mut out = xv.clone();
        for (r, &o) in owner.iter().enumerate() {
            for ((v, &g), &y) in out.row_mut(r).iter_mut().zip(gv.row(o)).zip(yv.row(r)) {
                *v += g * y;
            }
        }
        self.push(
            out,
            Op::GatedAdd {
                x,
                gate,
                y,
                owner: owner.to_vec(),
            },
        )
    }

    /// Scaled dot-product attention over independent row segments with
    /// grouped key/value heads. `q` is `· × heads·dh`, `k`/`v` are
    /// `· × kv_heads·dh`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segs: &[Segment],
        heads: usize,
        kv_heads: usize,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert!(
            heads > 0 && kv_heads > 0 && heads.is_multiple_of(kv_heads),
            "bad head counts"
        );
        assert_eq!(qv.cols % heads, 0, "query width not divisible by heads");
        let dh = qv.cols / heads;
        assert_eq!(kv.cols, kv_heads * dh, "key width");
        assert_eq!(vv.cols, kv_heads * dh, "value width");
        assert_eq!(kv.rows, vv.rows, "key/value rows");
        let group = heads / kv_heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut out = Mat::zeros(qv.rows, qv.cols);
        let mut probs = Vec::with_capacity(segs.len() * heads);
        for s in segs {
            assert!(
                s.q0 + s.nq <= qv.rows && s.k0 + s.nk <= kv.rows && s.nk > 0,
                "segment out of range"
            );
            for h in 0..heads {
                let kh = h / group;
                let mut p = Mat::zeros(s.nq, s.nk);
                T::gemm(
                    s.nq,
                    dh,
                    s.nk,
                    scale,
                    &qv.data[s.q0 * qv.cols + h * dh..],
                    qv.cols as isize,
                    1,
                    &kv.data[s.k0 * kv.cols + kh * dh..],
                    1,
                    kv.cols as isize,
                    T::zero(),
                    &mut p.data,
                    s.nk as isize,
                    1,
                );
                softmax_rows(&mut p);
                T::gemm(
                    s.nq,
                    s.nk,
                    dh,
                    T::one(),
                    &p.data,
                    s.nk as isize,
                    1,
                    &vv.data[s.k0 * vv.cols + kh * dh..],
                    vv.cols as isize,
                    1,
                    T::zero(),
                    &mut out.data[s.q0 * qv.cols + h * dh..],
                    qv.cols as isize,
                    1,
                );
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention(Box::new(AttentionTape {
                q,
                k,
                v,
                segs: segs.to_vec(),
                heads,
                kv_heads,
                probs,
            })),
        )
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        self.push(out, Op::Silu(x))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        softmax_rows(&mut out);
        self.push(out, Op::Softmax(x))
    }

    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = T::of(xv.cols as f64);
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows);
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + T::of(eps)).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x, inv_std })
    }

    /// Row-wise RMS norm without affine parameters.
    pub fn rms_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = T::of(xv.cols as f64);
        let mut out = xv.clone();
        let mut inv_rms = Vec::with_capacity(xv.rows);
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let ms = row.iter().map(|&v| v * v).sum::<T>() / n;
            let ir = T::one() / (ms + T::of(eps)).sqrt();
            for v in row.iter_mut() {
                *v *= ir;
            }
            inv_rms.push(ir);
        }
        self.push(out, Op::RmsNorm { x, inv_rms })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_cols(start, len);
        self.push(out, Op::SliceCols(x, start))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_rows(start, len);
        self.push(out, Op::SliceRows(x, start))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let rows = self.value(xs[0]).rows;
        let cols: usize = xs.iter().map(|&v| self.value(v).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &v in xs {
            let m = self.value(v);
            assert_eq!(m.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + m.cols].copy_from_slice(m.row(r));
            }
            off += m.cols;
        }
        self.push(out, Op::ConcatCols(xs.to_vec()))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let cols = self.value(xs[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in xs {
            let m = self.value(v);
            assert_eq!(m.cols, cols, "concat_rows col mismatch");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(xs.to_vec()))
    }

    /// Selects rows of `table` by index.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros(idx.len(), t.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        self.push(out, Op::Gather(table, idx.to_vec()))
    }

    /// Mean over all entries of `(a - b)²`; a `1 × 1` node.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "mse shape mismatch");
        let n = T::of(av.len() as f64);
        let s = av
            .data
            .iter()
            .zip(&bv.data)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / n;
        self.push(Mat::from_vec(1, 1, vec![s]), Op::MeanSquaredError(a, b))
    }

    /// Back-propagates `seed * d(root)` and returns parameter gradients.
    pub fn backward(&self, root: Var, seed: T) -> Grads<T> {
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let (r, c) = self.shape(root);
        grads[root.0] = Some(Mat::filled(r, c, seed));
        let mut out = Grads::new(self.params.len());

        fn acc<T: Scalar>(grads: &mut [Option<Mat<T>>], v: Var, g: Mat<T>) {
            match &mut grads[v.0] {
                Some(a) => a.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(ParamId(*id), &g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.matmul_nt(bv));
                    acc(&mut grads, *b, av.matmul_tn(&g));
                }
                Op::MatMulNT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.matmul(bv));
                    acc(&mut grads, *b, g.matmul_tn(av));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|v| -v));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.zip_map(bv, |x, y| x * y));
                    acc(&mut grads, *b, g.zip_map(av, |x, y| x * y));
                }
                Op::AddRow(x, row) => {
                    acc(&mut grads, *row, col_sums(&g));
                    acc(&mut grads, *x, g);
                }
                Op::Modulate {
                    x,
                    shift,
                    scale,
                    owner,
                } => {
                    let xv = self.value(*x);
                    let sc = self.value(*scale);
                    let mut dscale = Mat::zeros(sc.rows, sc.cols);
                    let mut dshift = Mat::zeros(sc.rows, sc.cols);
                    let mut dx = g.clone();
                    for (r, &o) in owner.iter().enumerate() {
                        let gr = g.row(r);
                        let xr = xv.row(r);
                        for c in 0..g.cols {
                            dscale.data[o * g.cols + c] += gr[c] * xr[c];
                            dshift.data[o * g.cols + c] += gr[c];
                        }
                        for (d, &s) in dx.row_mut(r).iter_mut().zip(sc.row(o)) {
                            *d *= T::one() + s;
                        }
                    }
                    acc(&mut grads, *shift, dshift);
                    acc(&mut grads, *scale, dscale);
                    acc(&mut grads, *x, dx);
                }
                Op::GatedAdd { x, gate, y, owner } => {
                    let yv = self.value(*y);
                    let gv = self.value(*gate);
                    let mut dgate = Mat::zeros(gv.rows, gv.cols);
                    let mut dy = g.clone();
                    for (r, &o) in owner.iter().enumerate() {
                        let gr = g.row(r);
                        let yr = yv.row(r);
                        for c in 0..g.cols {
                            dgate.data[o * g.cols + c] += gr[c] * yr[c];
                        }
                        for (d, &s) in dy.row_mut(r).iter_mut().zip(gv.row(o)) {
                            *d *= s;
                        }
                    }
                    acc(&mut grads, *gate, dgate);
                    acc(&mut grads, *y, dy);
                    acc(&mut grads, *x, g);
                }
                Op::Attention(t) => {
                    let (dq, dk, dv) = self.attention_backward(t, &g);
                    acc(&mut grads, t.q, dq);
                    acc(&mut grads, t.k, dk);
                    acc(&mut grads, t.v, dv);
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    acc(&mut grads, *x, g.map(|v| v * s));
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let d = g.zip_map(xv, |gv, v| {
                        let s = T::one() / (T::one() + (-v).exp());
                        gv * s * (T::one() + v * (T::one() - s))
                    });
                    acc(&mut grads, *x, d);
                }
                Op::Softmax(x) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let mut d = g.clone();
                    for r in 0..g.rows {
                        let yr = y.row(r);
                        let dot: T = g.row(r).iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for (dv, &yv) in d.row_mut(r).iter_mut().zip(yr) {
                            *dv = yv * (*dv - dot);
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = node.value.as_ref().expect("norm value");
                    let n = T::of(g.cols as f64);
                    let mut d = g.clone();
                    for r in 0..g.rows {
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let mg = gr.iter().copied().sum::<T>() / n;
                        let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for ((dv, &gv), &yv) in d.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *dv = inv_std[r] * (gv - mg - yv * mgy);
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::RmsNorm { x, inv_rms } => {
                    let y = node.value.as_ref().expect("norm value");
                    let n = T::of(g.cols as f64);
                    let mut d = g.clone();
                    for r in 0..g.rows {
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for ((dv, &gv), &yv) in d.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *dv = inv_rms[r] * (gv - yv * mgy);
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::SliceCols(x, start) => {
                    let (rows, cols) = self.shape(*x);
                    let mut d = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        d.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *x, d);
                }
                Op::SliceRows(x, start) => {
                    let (rows, cols) = self.shape(*x);
                    let mut d = Mat::zeros(rows, cols);
                    d.data[start * cols..(start + g.rows) * cols].copy_from_slice(&g.data);
                    acc(&mut grads, *x, d);
                }
                Op::ConcatCols(xs) => {
                    let mut off = 0;
                    for &v in xs {
                        let w = self.value(v).cols;
                        acc(&mut grads, v, g.slice_cols(off, w));
                        off += w;
                    }
                }
                Op::ConcatRows(xs) => {
                    let mut off = 0;
                    for &v in xs {
                        let h = self.value(v).rows;
                        acc(&mut grads, v, g.slice_rows(off, h));
                        off += h;
                    }
                }
                Op::Gather(table, idx) => {
                    let (rows, cols) = self.shape(*table);
                    let mut d = Mat::zeros(rows, cols);
                    for (r, &i) in idx.iter().enumerate() {
                        for (dv, &gv) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                            *dv += gv;
                        }
                    }
                    acc(&mut grads, *table, d);
                }
                Op::MeanSquaredError(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let k = g.data[0] * T::of(2.0) / T::of(av.len() as f64);
                    let da = av.zip_map(bv, |x, y| k * (x - y));
                    acc(&mut grads, *b, da.map(|v| -v));
                    acc(&mut grads, *a, da);
                }
            }
        }
        out
    }
}

fn col_sums<T: Scalar>(g: &Mat<T>) -> Mat<T> {
    let mut out = Mat::zeros(1, g.cols);
    for r in 0..g.rows {
        for (o, &v) in out.data.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

fn softmax_rows<T: Scalar>(m: &mut Mat<T>) {
    for r in 0..m.rows {
        let row = m.row_mut(r);
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

/// Rows `q0..q0+nq` of the queries attend to rows `k0..k0+nk` of the keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q0: usize,
    pub nq: usize,
    pub k0: usize,
    pub nk: usize,
}

struct AttentionTape<T> {
    q: Var,
    k: Var,
    v: Var,
    segs: Vec<Segment>,
    heads: usize,
    kv_heads: usize,
    probs: Vec<Mat<T>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    fn attention_backward(&self, t: &AttentionTape<T>, g: &Mat<T>) -> (Mat<T>, Mat<T>, Mat<T>) {
        let (qv, kv, vv) = (self.value(t.q), self.value(t.k), self.value(t.v));
        let dh = qv.cols / t.heads;
        let group = t.heads / t.kv_heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut dq = Mat::zeros(qv.rows, qv.cols);
        let mut dk = Mat::zeros(kv.rows, kv.cols);
        let mut dv = Mat::zeros(vv.rows, vv.cols);
        let mut probs = t.probs.iter();
        for s in &t.segs {
            for h in 0..t.heads {
                let kh = h / group;
                let p = probs.next().expect("attention probs");
                let go = &g.data[s.q0 * g.cols + h * dh..];
                // dV += Pᵀ dO
                T::gemm(
                    s.nk,
                    s.nq,
                    dh,
                    T::one(),
                    &p.data,
                    1,
                    s.nk as isize,
                    go,
                    g.cols as isize,
                    1,
                    T::one(),
                    &mut dv.data[s.k0 * vv.cols + kh * dh..],
                    vv.cols as isize,
                    1,
                );
                // dP = dO Vᵀ
                let mut ds = Mat::zeros(s.nq, s.nk);
                T::gemm(
                    s.nq,
                    dh,
                    s.nk,
                    T::one(),
                    go,
                    g.cols as isize,
                    1,
                    &vv.data[s.k0 * vv.cols + kh * dh..],
                    1,
                    vv.cols as isize,
                    T::zero(),
                    &mut ds.data,
                    s.nk as isize,
                    1,
                );
                for r in 0..s.nq {
                    let pr = p.row(r);
                    let dr = ds.row_mut(r);
                    let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                    for (d, &pv) in dr.iter_mut().zip(pr) {
                        *d = pv * (*d - dot) * scale;
                    }
                }
                // dQ = dS K, dK += dSᵀ Q
                T::gemm(
                    s.nq,
                    s.nk,
                    dh,
                    T::one(),
                    &ds.data,
                    s.nk as isize,
                    1,
                    &kv.data[s.k0 * kv.cols + kh * dh..],
                    kv.cols as isize,
                    1,
                    T::one(),
                    &mut dq.data[s.q0 * qv.cols + h * dh..],
                    qv.cols as isize,
                    1,
                );
                T::gemm(
                    s.nk,
                    s.nq,
                    dh,
                    T::one(),
                    &ds.data,
                    1,
                    s.nk as isize,
                    &qv.data[s.q0 * qv.cols + h * dh..],
                    qv.cols as isize,
                    1,
                    T::one(),
                    &mut dk.data[s.k0 * kv.cols + kh * dh..],
                    kv.cols as isize,
                    1,
                );
            }
        }
        (dq, dk, dv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` with respect to every entry of param `id`.
    fn numeric_grad(
        store: &ParamStore<f64>,
        id: ParamId,
        f: &dyn Fn(&ParamStore<f64>) -> f64,
    ) -> Mat<f64> {
        let base = store.get(id).clone();
        let mut out = Mat::zeros(base.rows, base.cols);
        let h = 1e-6;
        for i in 0..base.len() {
            let mut s = store.clone();
            s.get_mut(id).data[i] += h;
            let fp = f(&s);
            s.get_mut(id).data[i] -= 2.0 * h;
            let fm = f(&s);
            out.data[i] = (fp - fm) / (2.0 * h);
        }
        out
    }

    fn check(build: &dyn Fn(&mut Graph<f64>, &[ParamId]) -> Var, shapes: &[(usize, usize)]) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| store.add(format!("p{i}"), Mat::randn(r, c, 1.0, &mut rng)))
            .collect();
        let mut g = Graph::new(&store);
        let root = build(&mut g, &ids);
        let grads = g.backward(root, 1.0);
        let f = |s: &ParamStore<f64>| {
            let mut g = Graph::new(s);
            let root = build(&mut g, &ids);
            g.value(root).data[0]
        };
        for &id in &ids {
            let num = numeric_grad(&store, id, &f);
            let ana = grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Mat::zeros(num.rows, num.cols));
            let err = ana.max_abs_diff(&num);
            assert!(err < 1e-6, "param {} grad error {err}", store.name(id));
        }
    }

    fn to_scalar(g: &mut Graph<f64>, x: Var) -> Var {
        let (r, c) = g.shape(x);
        let target = g.constant(Mat::from_vec(
            r,
            c,
            (0..r * c).map(|i| (i as f64 * 0.37).sin()).collect(),
        ));
        g.mse(x, target)
    }

    #[test]
    fn matmul_and_nt_grads() {
        check(
            &|g, p| {
                let a = g.param(p[0]);
                let b = g.param(p[1]);
                let c = g.param(p[2]);
                let ab = g.matmul(a, b);
                let abc = g.matmul_nt(ab, c);
                to_scalar(g, abc)
            },
            &[(3, 4), (4, 5), (2, 5)],
        );
    }

    #[test]
    fn norm_softmax_silu_grads() {
        check(
            &|g, p| {
                let x = g.param(p[0]);
                let ln = g.layer_norm(x, 1e-5);
                let rn = g.rms_norm(x, 1e-5);
                let s = g.softmax(ln);
                let t = g.silu(rn);
                let y = g.mul(s, t);
                to_scalar(g, y)
            },
            &[(3, 6)],
        );
    }

    #[test]
    fn modulate_gate_slice_concat_gather_grads() {
        check(
            &|g, p| {
                let x = g.param(p[0]);
                let sh = g.param(p[1]);
                let sc = g.param(p[2]);
                let table = g.param(p[3]);
                let m = g.modulate(x, sh, sc);
                let e = g.gather(table, &[2, 0, 2]);
                let ga = g.gated_add(m, sh, e);
                let left = g.slice_cols(ga, 0, 2);
                let right = g.slice_cols(ga, 2, 2);
                let lr = g.concat_cols(&[right, left]);
                let top = g.slice_rows(lr, 0, 1);
                let stacked = g.concat_rows(&[lr, top]);
                let sc2 = g.scale(stacked, 0.5);
                let rowed = g.add_row(sc2, sh);
                let d = g.sub(rowed, stacked);
                let a = g.add(d, stacked);
                to_scalar(g, a)
            },
            &[(3, 4), (1, 4), (1, 4), (3, 4)],
        );
    }

    #[test]
    fn param_node_is_shared() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Mat::zeros(2, 2));
        let mut g = Graph::new(&store);
        assert_eq!(g.param(id), g.param(id));
    }

    #[test]
    fn strided_gemm_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Mat::<f64>::randn(5, 3, 1.0, &mut rng);
        let b = Mat::<f64>::randn(5, 4, 1.0, &mut rng);
        let tn = a.matmul_tn(&b);
        let naive = a.transpose().matmul(&b);
        assert!(tn.max_abs_diff(&naive) < 1e-12);
    }

    #[test]
    fn segmented_attention_grads() {
        let segs = [
            Segment {
                q0: 0,
                nq: 3,
                k0: 0,
                nk: 2,
            },
            Segment {
                q0: 3,
                nq: 2,
                k0: 2,
                nk: 4,
            },
        ];
        check(
            &|g, p| {
                let q = g.param(p[0]);
                let k = g.param(p[1]);
                let v = g.param(p[2]);
                let o = g.attention(q, k, v, &segs, 4, 2);
                to_scalar(g, o)
            },
            &[(5, 8), (6, 4), (6, 4)],
        );
    }

    #[test]
    fn per_row_modulation_grads() {
        let owner = [0, 0, 1, 2, 2];
        check(
            &|g, p| {
                let x = g.param(p[0]);
                let sh = g.param(p[1]);
                let sc = g.param(p[2]);
                let m = g.modulate_rows(x, sh, sc, &owner);
                let y = g.gated_add_rows(m, sc, x, &owner);
                to_scalar(g, y)
            },
            &[(5, 3), (3, 3), (3, 3)],
        );
    }

    /// Plain multi-head attention written out with softmax/matmul ops.
    fn naive_mha(
        q: &Mat<f64>,
        k: &Mat<f64>,
        v: &Mat<f64>,
        heads: usize,
        kv_heads: usize,
    ) -> Mat<f64> {
        let dh = q.cols / heads;
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (qv, kv, vv) = (
            g.constant(q.clone()),
            g.constant(k.clone()),
            g.constant(v.clone()),
        );
        let mut outs = Vec::new();
        for h in 0..heads {
            let kh = h * kv_heads / heads;
            let qh = g.slice_cols(qv, h * dh, dh);
            let khv = g.slice_cols(kv, kh * dh, dh);
            let vh = g.slice_cols(vv, kh * dh, dh);
            let s = g.matmul_nt(qh, khv);
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let p = g.softmax(s);
            outs.push(g.matmul(p, vh));
        }
        let o = g.concat_cols(&outs);
        g.value(o).clone()
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Mat::randn(6, 10, 3.0, &mut rng).map(|v| v + 2.0));
        let y = g.layer_norm(x, 0.0);
        let out = g.value(y);
        for r in 0..out.rows {
            let row = &out.data[r * 10..(r + 1) * 10];
            let mean: f64 = row.iter().sum::<f64>() / 10.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_matches_naive_multihead() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = Mat::randn(4, 8, 1.0, &mut rng);
        let k = Mat::randn(5, 8, 1.0, &mut rng);
        let v = Mat::randn(5, 8, 1.0, &mut rng);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (a, b, c) = (
            g.constant(q.clone()),
            g.constant(k.clone()),
            g.constant(v.clone()),
        );
        let o = g.attention(
            a,
            b,
            c,
            &[Segment {
                q0: 0,
                nq: 4,
                k0: 0,
                nk: 5,
            }],
            4,
            4,
        );
        assert!(g.value(o).max_abs_diff(&naive_mha(&q, &k, &v, 4, 4)) < 1e-12);
        // grouped heads: repeat each kv head across its query group
        let k2 = Mat::randn(5, 4, 1.0, &mut rng);
        let v2 = Mat::randn(5, 4, 1.0, &mut rng);
        let (b2, c2) = (g.constant(k2.clone()), g.constant(v2.clone()));
        let o2 = g.attention(
            a,
            b2,
            c2,
            &[Segment {
                q0: 0,
                nq: 4,
                k0: 0,
                nk: 5,
            }],
            4,
            2,
        );
        assert!(g.value(o2).max_abs_diff(&naive_mha(&q, &k2, &v2, 4, 2)) < 1e-12);
    }
}
