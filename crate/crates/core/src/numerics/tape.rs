//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records one node per operation whose inputs include at least one
//! tracked [`Var`]. Each node keeps the tensors its backward rule needs (shared
//! buffers, no copies) and a closure producing input gradients from the output
//! gradient. Operations on untracked inputs, and every operation on an
//! inference tape, record nothing; their intermediates are freed as soon as the
//! caller drops them.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::sync::Arc;

use super::param::Param;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

/// A tensor value, optionally tracked by a tape.
#[derive(Clone, Debug)]
pub struct Var<T: Scalar> {
    value: Tensor<T>,
    node: Option<NodeId>,
}

impl<T: Scalar> Var<T> {
    pub fn constant(value: Tensor<T>) -> Self {
        Var { value, node: None }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn into_value(self) -> Tensor<T> {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Var::constant(self.value.clone())
    }
}

impl<T: Scalar> From<Tensor<T>> for Var<T> {
    fn from(t: Tensor<T>) -> Self {
        Var::constant(t)
    }
}

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T: Scalar> {
    inputs: Vec<Option<NodeId>>,
    backward: Option<BackwardFn<T>>,
}

/// Boolean visibility matrix `[rows, cols]`, broadcast over leading axes of
/// the logits it masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::shape("mask", &[rows, cols], &[bits.len()]));
        }
        Ok(Mask { rows, cols, bits })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for q in 0..rows {
            for k in 0..cols {
                bits.push(f(q, k));
            }
        }
        Mask { rows, cols, bits }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.cols + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.bits[q * self.cols..(q + 1) * self.cols]
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Gelu,
    Tanh,
    Softplus,
    Square,
    Sin,
    Exp,
    Recip,
    Neg,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Unary {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Gelu => {
                let half = T::lit(0.5);
                let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
                half * x * (T::one() + inner.tanh())
            }
            Unary::Tanh => x.tanh(),
            Unary::Softplus => x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            Unary::Square => x * x,
            Unary::Sin => x.sin(),
            Unary::Exp => x.exp(),
            Unary::Recip => x.recip(),
            Unary::Neg => -x,
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Gelu => {
                let half = T::lit(0.5);
                let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
                let t = inner.tanh();
                let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
                half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
            }
            Unary::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Unary::Softplus => T::one() / (T::one() + (-x).exp()),
            Unary::Square => T::lit(2.0) * x,
            Unary::Sin => x.cos(),
            Unary::Exp => x.exp(),
            Unary::Recip => -(x * x).recip(),
            Unary::Neg => -T::one(),
        }
    }
}

/// Gradients produced by [`Tape::backward`], keyed by leaf node.
pub struct Gradients<T: Scalar> {
    leaves: BTreeMap<NodeId, Tensor<T>>,
    params: BTreeMap<String, (Option<NodeId>, Vec<usize>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf; zeros when the leaf does not reach the loss.
    pub fn wrt(&self, var: &Var<T>) -> Tensor<T> {
        var.node
            .and_then(|id| self.leaves.get(&id).cloned())
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    /// Gradient for a parameter registered with [`Tape::param`].
    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        let (node, shape) = self.params.get(name)?;
        Some(
            node.and_then(|id| self.leaves.get(&id).cloned())
                .unwrap_or_else(|| Tensor::zeros(shape)),
        )
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<BTreeMap<String, Var<T>>>,
    recording: bool,
    ops: Cell<usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    *slot = Some(match slot.take() {
        None => g,
        Some(prev) => {
            if prev.shape() != g.shape() {
                return Err(Error::shape("gradient accumulation", prev.shape(), g.shape()));
            }
            let shape = prev.shape().to_vec();
            let mut acc = prev.into_vec();
            for (a, &b) in acc.iter_mut().zip(g.data()) {
                *a += b;
            }
            Tensor::from_vec_unchecked(&shape, acc)
        }
    });
    Ok(())
}

/// Batched strided GEMM over rank-2 or equal-batch rank-3 operands.
pub(crate) fn gemm<T: Scalar>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Result<Tensor<T>> {
    let bad = || Error::shape("matmul", a.shape(), b.shape());
    let (batch, ar, ac, br, bc) = match (a.shape(), b.shape()) {
        ([ar, ac], [br, bc]) => (1, *ar, *ac, *br, *bc),
        ([na, ar, ac], [nb, br, bc]) if na == nb => (*na, *ar, *ac, *br, *bc),
        _ => return Err(bad()),
    };
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(bad());
    }
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    let mut out = vec![T::zero(); batch * m * n];
    let (astep, bstep, cstep) = (ar * ac, br * bc, m * n);
    for i in 0..batch {
        // SAFETY: offsets and strides stay within the operand buffers whose
        // dimensions were validated above; `out` is a distinct allocation.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                a.data().as_ptr().add(i * astep),
                rsa,
                csa,
                b.data().as_ptr().add(i * bstep),
                rsb,
                csb,
                T::zero(),
                out.as_mut_ptr().add(i * cstep),
                n as isize,
                1,
            );
        }
    }
    let shape: Vec<usize> = if a.ndim() == 3 { vec![batch, m, n] } else { vec![m, n] };
    Ok(Tensor::from_vec_unchecked(&shape, out))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(BTreeMap::new()),
            recording: true,
            ops: Cell::new(0),
        }
    }

    /// A tape that never records; every result is a constant.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Count of operations evaluated through this tape, recorded or not.
    pub fn op_count(&self) -> usize {
        self.ops.get()
    }

    /// A new differentiable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        if !self.recording {
            return Var::constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            inputs: Vec::new(),
            backward: None,
        });
        Var {
            value,
            node: Some(nodes.len() - 1),
        }
    }

    /// Binds a parameter: one shared leaf per name when it requires grad,
    /// otherwise a constant.
    pub fn param(&self, p: &Param<T>) -> Var<T> {
        if !self.recording || !p.requires_grad() {
            return Var::constant(p.value().clone());
        }
        if let Some(v) = self.params.borrow().get(p.name()) {
            return v.clone();
        }
        let v = self.leaf(p.value().clone());
        self.params.borrow_mut().insert(p.name().to_string(), v.clone());
        v
    }

    fn record(
        &self,
        value: Tensor<T>,
        inputs: &[&Var<T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Var<T> {
        self.ops.set(self.ops.get() + 1);
        if !self.recording || inputs.iter().all(|v| v.node.is_none()) {
            return Var::constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            inputs: inputs.iter().map(|v| v.node).collect(),
            backward: Some(Box::new(backward)),
        });
        Var {
            value,
            node: Some(nodes.len() - 1),
        }
    }

    /// Runs the recorded operations in reverse from a scalar `loss`, consuming
    /// the tape.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let mut nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let params: BTreeMap<String, (Option<NodeId>, Vec<usize>)> = std::mem::take(
            &mut *self.params.borrow_mut(),
        )
        .into_iter()
        .map(|(k, v)| (k, (v.node, v.shape().to_vec())))
        .collect();
        let mut leaves = BTreeMap::new();
        let Some(root) = loss.node else {
            return Ok(Gradients { leaves, params });
        };
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::ones(loss.shape()));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = std::mem::replace(
                &mut nodes[id],
                Node {
                    inputs: Vec::new(),
                    backward: None,
                },
            );
            match node.backward {
                None => {
                    leaves.insert(id, g);
                }
                Some(f) => {
                    let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
                    let input_grads = f(&g, &needs)?;
                    for (input, ig) in node.inputs.iter().zip(input_grads) {
                        if let (Some(input), Some(ig)) = (input, ig) {
                            accumulate(&mut grads[*input], ig)?;
                        }
                    }
                }
            }
        }
        Ok(Gradients { leaves, params })
    }

    // ---------------------------------------------------------------- linear

    fn gemm_op(&self, a: &Var<T>, ta: bool, b: &Var<T>, tb: bool) -> Result<Var<T>> {
        let out = gemm(&a.value, ta, &b.value, tb)?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.record(out, &[a, b], move |g, needs| {
            let da = if needs[0] {
                Some(match (ta, tb) {
                    (false, false) => gemm(g, false, &bv, true)?,
                    (false, true) => gemm(g, false, &bv, false)?,
                    (true, false) => gemm(&bv, false, g, true)?,
                    (true, true) => gemm(&bv, true, g, true)?,
                })
            } else {
                None
            };
            let db = if needs[1] {
                Some(match (ta, tb) {
                    (false, false) => gemm(&av, true, g, false)?,
                    (false, true) => gemm(g, true, &av, false)?,
                    (true, false) => gemm(&av, false, g, false)?,
                    (true, true) => gemm(g, true, &av, true)?,
                })
            } else {
                None
            };
            Ok(vec![da, db])
        }))
    }

    /// `a · b` for `[m,k]·[k,n]`, or batched over a shared leading axis.
    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.gemm_op(a, false, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.gemm_op(a, false, b, true)
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.gemm_op(a, true, b, false)
    }

    pub fn transpose(&self, a: &Var<T>) -> Result<Var<T>> {
        let out = a.value.transpose2d()?;
        Ok(self.record(out, &[a], |g, _| Ok(vec![Some(g.transpose2d()?)])))
    }

    // ----------------------------------------------------------- elementwise

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value.add(&b.value)?;
        Ok(self.record(out, &[a, b], |g, needs| {
            Ok(vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())])
        }))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value.sub(&b.value)?;
        Ok(self.record(out, &[a, b], |g, needs| {
            Ok(vec![
                needs[0].then(|| g.clone()),
                needs[1].then(|| g.scale(-T::one())),
            ])
        }))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value.zip_map(&b.value, |x, y| x * y)?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.record(out, &[a, b], move |g, needs| {
            let da = if needs[0] { Some(g.zip_map(&bv, |x, y| x * y)?) } else { None };
            let db = if needs[1] { Some(g.zip_map(&av, |x, y| x * y)?) } else { None };
            Ok(vec![da, db])
        }))
    }

    pub fn scale(&self, a: &Var<T>, factor: T) -> Result<Var<T>> {
        let out = a.value.scale(factor);
        Ok(self.record(out, &[a], move |g, _| Ok(vec![Some(g.scale(factor))])))
    }

    /// `x · s` for a one-element `s`.
    pub fn mul_scalar(&self, x: &Var<T>, s: &Var<T>) -> Result<Var<T>> {
        if s.value.numel() != 1 {
            return Err(Error::shape("mul_scalar", x.shape(), s.shape()));
        }
        let sv = s.value.item();
        let out = x.value.scale(sv);
        let (xv, s_shape) = (x.value.clone(), s.shape().to_vec());
        Ok(self.record(out, &[x, s], move |g, needs| {
            let dx = needs[0].then(|| g.scale(sv));
            let ds = if needs[1] {
                let dot: T = g.data().iter().zip(xv.data()).map(|(&a, &b)| a * b).sum();
                Some(Tensor::from_vec_unchecked(&s_shape, vec![dot]))
            } else {
                None
            };
            Ok(vec![dx, ds])
        }))
    }

    pub fn unary(&self, a: &Var<T>, op: Unary) -> Result<Var<T>> {
        let out = a.value.map(|x| op.apply(x));
        let av = a.value.clone();
        Ok(self.record(out, &[a], move |g, _| {
            Ok(vec![Some(g.zip_map(&av, |gi, xi| gi * op.derivative(xi))?)])
        }))
    }

    pub fn gelu(&self, a: &Var<T>) -> Result<Var<T>> {
        self.unary(a, Unary::Gelu)
    }

    pub fn softplus(&self, a: &Var<T>) -> Result<Var<T>> {
        self.unary(a, Unary::Softplus)
    }

    pub fn square(&self, a: &Var<T>) -> Result<Var<T>> {
        self.unary(a, Unary::Square)
    }

    // ------------------------------------------------------------ broadcasts

    /// Adds `bias[n]` to every row of `x[.., n]`.
    pub fn add_bias(&self, x: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
        let (rows, cols) = x.value.as_matrix_dims();
        if bias.value.numel() != cols {
            return Err(Error::shape("add_bias", x.shape(), bias.shape()));
        }
        let b = bias.value.data();
        let mut out = x.value.to_vec();
        for r in 0..rows {
            for (o, &bb) in out[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                *o += bb;
            }
        }
        let out = Tensor::from_vec_unchecked(x.shape(), out);
        let b_shape = bias.shape().to_vec();
        Ok(self.record(out, &[x, bias], move |g, needs| {
            let db = if needs[1] {
                let mut acc = vec![T::zero(); cols];
                for r in 0..rows {
                    for (a, &gg) in acc.iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
                        *a += gg;
                    }
                }
                Some(Tensor::from_vec_unchecked(&b_shape, acc))
            } else {
                None
            };
            Ok(vec![needs[0].then(|| g.clone()), db])
        }))
    }

    /// Adds `y[p, n]` to each consecutive `p`-row tile of `x[k·p, n]`.
    pub fn add_tiled(&self, x: &Var<T>, y: &Var<T>) -> Result<Var<T>> {
        let (rows, cols) = x.value.as_matrix_dims();
        let (p, ycols) = y.value.as_matrix_dims();
        if ycols != cols || rows % p != 0 {
            return Err(Error::shape("add_tiled", x.shape(), y.shape()));
        }
        let yd = y.value.data();
        let mut out = x.value.to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            *o += yd[i % (p * cols)];
        }
        let out = Tensor::from_vec_unchecked(x.shape(), out);
        let y_shape = y.shape().to_vec();
        Ok(self.record(out, &[x, y], move |g, needs| {
            let dy = if needs[1] {
                let mut acc = vec![T::zero(); p * cols];
                for (i, &gg) in g.data().iter().enumerate() {
                    acc[i % (p * cols)] += gg;
                }
                Some(Tensor::from_vec_unchecked(&y_shape, acc))
            } else {
                None
            };
            Ok(vec![needs[0].then(|| g.clone()), dy])
        }))
    }

    /// Adds row `c[i]` to every row of sequence `i` in `x[k·seq, n]`.
    pub fn add_per_seq(&self, x: &Var<T>, c: &Var<T>, seq: usize) -> Result<Var<T>> {
        let (rows, cols) = x.value.as_matrix_dims();
        let (k, ccols) = c.value.as_matrix_dims();
        if ccols != cols || rows != k * seq {
            return Err(Error::shape("add_per_seq", x.shape(), c.shape()));
        }
        let cd = c.value.data();
        let mut out = x.value.to_vec();
        for r in 0..rows {
            let s = r / seq;
            for j in 0..cols {
                out[r * cols + j] += cd[s * cols + j];
            }
        }
        let out = Tensor::from_vec_unchecked(x.shape(), out);
        let c_shape = c.shape().to_vec();
        Ok(self.record(out, &[x, c], move |g, needs| {
            let dc = if needs[1] {
                let mut acc = vec![T::zero(); k * cols];
                let gd = g.data();
                for r in 0..rows {
                    let s = r / seq;
                    for j in 0..cols {
                        acc[s * cols + j] += gd[r * cols + j];
                    }
                }
                Some(Tensor::from_vec_unchecked(&c_shape, acc))
            } else {
                None
            };
            Ok(vec![needs[0].then(|| g.clone()), dc])
        }))
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&self, a: &Var<T>) -> Result<Var<T>> {
        let out = Tensor::scalar(a.value.sum());
        let shape = a.shape().to_vec();
        Ok(self.record(out, &[a], move |g, _| {
            Ok(vec![Some(Tensor::full(&shape, g.item()))])
        }))
    }

    pub fn mean(&self, a: &Var<T>) -> Result<Var<T>> {
        let n = T::lit(a.value.numel() as f64);
        let s = self.sum(a)?;
        self.scale(&s, T::one() / n)
    }

    // ----------------------------------------------------------- normalizers

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&self, x: &Var<T>, gain: &Var<T>, bias: &Var<T>, eps: f64) -> Result<Var<T>> {
        let (rows, cols) = x.value.as_matrix_dims();
        if gain.value.numel() != cols || bias.value.numel() != cols {
            return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
        }
        let eps = T::lit(eps);
        let n = T::lit(cols as f64);
        let xd = x.value.data();
        let gd = gain.value.data();
        let bd = bias.value.data();
        let mut xhat = vec![T::zero(); rows * cols];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..cols {
                let h = (row[j] - mean) * is;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * gd[j] + bd[j];
            }
        }
        let out = Tensor::from_vec_unchecked(x.shape(), out);
        let xhat = Tensor::from_vec_unchecked(x.shape(), xhat);
        let gain_v = gain.value.clone();
        let (g_shape, b_shape) = (gain.shape().to_vec(), bias.shape().to_vec());
        let (xhat_saved, inv_std) = (xhat, inv_std);
        Ok(self.record(out, &[x, gain, bias], move |g, needs| {
            let gd = g.data();
            let hd = xhat_saved.data();
            let gam = gain_v.data();
            let dx = if needs[0] {
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..cols {
                        let dh = gd[r * cols + j] * gam[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hd[r * cols + j];
                    }
                    mean_dh = mean_dh / n;
                    mean_dh_h = mean_dh_h / n;
                    for j in 0..cols {
                        let dh = gd[r * cols + j] * gam[j];
                        dx[r * cols + j] =
                            inv_std[r] * (dh - mean_dh - hd[r * cols + j] * mean_dh_h);
                    }
                }
                Some(Tensor::from_vec_unchecked(xhat_saved.shape(), dx))
            } else {
                None
            };
            let (dgain, dbias) = if needs[1] || needs[2] {
                let mut dg = vec![T::zero(); cols];
                let mut db = vec![T::zero(); cols];
                for r in 0..rows {
                    for j in 0..cols {
                        dg[j] += gd[r * cols + j] * hd[r * cols + j];
                        db[j] += gd[r * cols + j];
                    }
                }
                (
                    needs[1].then(|| Tensor::from_vec_unchecked(&g_shape, dg)),
                    needs[2].then(|| Tensor::from_vec_unchecked(&b_shape, db)),
                )
            } else {
                (None, None)
            };
            Ok(vec![dx, dgain, dbias])
        }))
    }

    /// Row softmax over the last axis. Entries hidden by `mask` are exactly
    /// zero; visible entries are stabilized by the visible row maximum.
    pub fn softmax_masked(&self, logits: &Var<T>, mask: Option<&Arc<Mask>>) -> Result<Var<T>> {
        let shape = logits.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::Contract(format!("softmax over shape {shape:?}")));
        }
        let cols = shape[shape.len() - 1];
        let q = shape[shape.len() - 2];
        if let Some(m) = mask {
            if m.rows() != q || m.cols() != cols {
                return Err(Error::shape("softmax_masked", &shape, &[m.rows(), m.cols()]));
            }
            if let Some(row) = (0..q).find(|&r| !m.row(r).iter().any(|&b| b)) {
                return Err(Error::DegenerateMask { row });
            }
        }
        let rows = logits.value.numel() / cols;
        let xd = logits.value.data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let vis = mask.map(|m| m.row(r % q));
            let row = &xd[r * cols..(r + 1) * cols];
            let visible = |j: usize| vis.is_none_or(|v| v[j]);
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if visible(j) && v > max {
                    max = v;
                }
            }
            let mut total = T::zero();
            let o = &mut out[r * cols..(r + 1) * cols];
            for j in 0..cols {
                if visible(j) {
                    let e = (row[j] - max).exp();
                    o[j] = e;
                    total += e;
                }
            }
            for v in o.iter_mut() {
                *v = *v / total;
            }
        }
        let out = Tensor::from_vec_unchecked(&shape, out);
        let probs = out.clone();
        Ok(self.record(out, &[logits], move |g, _| {
            let pd = probs.data();
            let gd = g.data();
            let mut dx = vec![T::zero(); rows * cols];
            for r in 0..rows {
                let span = r * cols..(r + 1) * cols;
                let dot: T = pd[span.clone()]
                    .iter()
                    .zip(&gd[span.clone()])
                    .map(|(&p, &gg)| p * gg)
                    .sum();
                for j in span {
                    dx[j] = pd[j] * (gd[j] - dot);
                }
            }
            Ok(vec![Some(Tensor::from_vec_unchecked(probs.shape(), dx))])
        }))
    }

    // -------------------------------------------------------------- layout

    pub fn reshape(&self, a: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let out = a.value.reshape(shape)?;
        let orig = a.shape().to_vec();
        Ok(self.record(out, &[a], move |g, _| Ok(vec![Some(g.reshape(&orig)?)])))
    }

    /// `[k·seq, heads·dh]` → `[k·heads, seq, dh]`.
    pub fn split_heads(&self, x: &Var<T>, seq: usize, heads: usize) -> Result<Var<T>> {
        let (rows, cols) = x.value.as_matrix_dims();
        if rows % seq != 0 || cols % heads != 0 {
            return Err(Error::shape("split_heads", x.shape(), &[seq, heads]));
        }
        let out = split_heads_raw(&x.value, seq, heads);
        Ok(self.record(out, &[x], move |g, _| {
            Ok(vec![Some(merge_heads_raw(g, seq, heads))])
        }))
    }

    /// Inverse of [`split_heads`](Self::split_heads).
    pub fn merge_heads(&self, x: &Var<T>, seq: usize, heads: usize) -> Result<Var<T>> {
        let s = x.shape();
        if s.len() != 3 || s[1] != seq || s[0] % heads != 0 {
            return Err(Error::shape("merge_heads", s, &[seq, heads]));
        }
        let out = merge_heads_raw(&x.value, seq, heads);
        Ok(self.record(out, &[x], move |g, _| {
            Ok(vec![Some(split_heads_raw(g, seq, heads))])
        }))
    }

    /// Rows `[start, start+len)` of a matrix.
    pub fn rows(&self, x: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
        let (rows, cols) = x.value.as_matrix_dims();
        if x.value.ndim() != 2 || start + len > rows || len == 0 {
            return Err(Error::shape("rows", x.shape(), &[start, len]));
        }
        let out = Tensor::from_vec_unchecked(
            &[len, cols],
            x.value.data()[start * cols..(start + len) * cols].to_vec(),
        );
        Ok(self.record(out, &[x], move |g, _| {
            let mut dx = vec![T::zero(); rows * cols];
            dx[start * cols..(start + len) * cols].copy_from_slice(g.data());
            Ok(vec![Some(Tensor::from_vec_unchecked(&[rows, cols], dx))])
        }))
    }

    pub fn concat_rows(&self, parts: &[Var<T>]) -> Result<Var<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let cols = first.value.as_matrix_dims().1;
        let mut data = Vec::new();
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.value.as_matrix_dims();
            if c != cols || p.value.ndim() != 2 {
                return Err(Error::shape("concat_rows", first.shape(), p.shape()));
            }
            data.extend_from_slice(p.value.data());
            lens.push(r);
        }
        let total: usize = lens.iter().sum();
        let out = Tensor::from_vec_unchecked(&[total, cols], data);
        let refs: Vec<&Var<T>> = parts.iter().collect();
        Ok(self.record(out, &refs, move |g, needs| {
            let mut start = 0;
            let mut grads = Vec::with_capacity(lens.len());
            for (&len, &need) in lens.iter().zip(needs) {
                grads.push(need.then(|| {
                    Tensor::from_vec_unchecked(
                        &[len, cols],
                        g.data()[start * cols..(start + len) * cols].to_vec(),
                    )
                }));
                start += len;
            }
            Ok(grads)
        }))
    }

    /// Embedding lookup: rows `ids` of `table[v, n]`.
    pub fn gather_rows(&self, table: &Var<T>, ids: &[usize]) -> Result<Var<T>> {
        let (vocab, cols) = table.value.as_matrix_dims();
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Input(format!("row {bad} outside table of {vocab}")));
        }
        if ids.is_empty() {
            return Err(Error::Contract("gather of zero rows".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(table.value.row(i));
        }
        let out = Tensor::from_vec_unchecked(&[ids.len(), cols], data);
        let ids = ids.to_vec();
        let t_shape = table.shape().to_vec();
        Ok(self.record(out, &[table], move |g, _| {
            let mut dt = vec![T::zero(); vocab * cols];
            for (r, &i) in ids.iter().enumerate() {
                for j in 0..cols {
                    dt[i * cols + j] += g.data()[r * cols + j];
                }
            }
            Ok(vec![Some(Tensor::from_vec_unchecked(&t_shape, dt))])
        }))
    }

    // ---------------------------------------------------------- quantization

    /// Symmetric uniform fake quantization with a straight-through gradient:
    /// `clamp(round(x/scale), -qmax, qmax) · scale`, gradient 1 where
    /// `|x/scale| ≤ qmax` and 0 outside. With `round = false` the rounding is
    /// skipped, which yields the surrogate whose exact derivative the
    /// straight-through rule reports.
    pub fn fake_quantize(&self, x: &Var<T>, bits: u32, scale: T, round: bool) -> Result<Var<T>> {
        let out = fake_quantize_tensor(&x.value, bits, scale, round)?;
        let qmax = qmax::<T>(bits);
        let xv = x.value.clone();
        Ok(self.record(out, &[x], move |g, _| {
            Ok(vec![Some(g.zip_map(&xv, |gi, xi| {
                if (xi / scale).abs() <= qmax {
                    gi
                } else {
                    T::zero()
                }
            })?)])
        }))
    }
}

pub(crate) fn qmax<T: Scalar>(bits: u32) -> T {
    T::lit(((1u64 << (bits - 1)) - 1) as f64)
}

pub fn fake_quantize_tensor<T: Scalar>(x: &Tensor<T>, bits: u32, scale: T, round: bool) -> Result<Tensor<T>> {
    if !(scale > T::zero()) || !scale.is_finite() {
        return Err(Error::Config(format!("quantizer scale must be positive, got {scale}")));
    }
    if !(2..=32).contains(&bits) {
        return Err(Error::Config(format!("quantizer bit width {bits} outside 2..=32")));
    }
    let q = qmax::<T>(bits);
    Ok(x.map(|v| {
        let u = v / scale;
        let u = if round { u.round() } else { u };
        u.max(-q).min(q) * scale
    }))
}

fn split_heads_raw<T: Scalar>(x: &Tensor<T>, seq: usize, heads: usize) -> Tensor<T> {
    let (rows, cols) = x.as_matrix_dims();
    let k = rows / seq;
    let dh = cols / heads;
    let src = x.data();
    let mut out = vec![T::zero(); rows * cols];
    for b in 0..k {
        for i in 0..seq {
            for h in 0..heads {
                let s = (b * seq + i) * cols + h * dh;
                let d = ((b * heads + h) * seq + i) * dh;
                out[d..d + dh].copy_from_slice(&src[s..s + dh]);
            }
        }
    }
    Tensor::from_vec_unchecked(&[k * heads, seq, dh], out)
}

fn merge_heads_raw<T: Scalar>(x: &Tensor<T>, seq: usize, heads: usize) -> Tensor<T> {
    let s = x.shape();
    let (kh, dh) = (s[0], s[2]);
    let k = kh / heads;
    let cols = heads * dh;
    let src = x.data();
    let mut out = vec![T::zero(); k * seq * cols];
    for b in 0..k {
        for i in 0..seq {
            for h in 0..heads {
                let d = (b * seq + i) * cols + h * dh;
                let so = ((b * heads + h) * seq + i) * dh;
                out[d..d + dh].copy_from_slice(&src[so..so + dh]);
            }
        }
    }
    Tensor::from_vec_unchecked(&[k * seq, cols], out)
}
