//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Operations are recorded in topological order during the forward pass;
//! [`Tape::backward`] replays them once, in reverse, accumulating gradients
//! into each node's tensor. Gradients are kept until [`Tape::zero_grads`],
//! so repeated backward calls within one step accumulate.
//!
//! Labeled gradient gates ([`Tape::gate`]) are identity nodes whose backward
//! pass can be switched off per gate id. They are how individual gradient
//! paths are isolated for the per-consumer decomposition analysis without
//! touching the model definition.

use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::{broadcast_shape, is_suffix_shape, strides, BroadcastIter, Tensor};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Handle to a gradient gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateId(usize);

/// Boolean attention mask; `true` marks positions that participate.
/// The shape must be broadcastable to the tensor the mask is applied to.
#[derive(Debug, Clone)]
pub struct Mask {
    pub shape: Vec<usize>,
    pub keep: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, keep: Vec<bool>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, keep.len(), "mask shape {:?} implies {} flags, got {}", shape, numel, keep.len());
        Mask { shape, keep }
    }
}

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    Matmul(Var, Var),
    /// a @ b^T over the trailing axes (b stored untransposed).
    MatmulBt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var, S),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: S },
    Sum(Var),
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Gather { table: Var, ids: Rc<Vec<usize>> },
    Gate { x: Var, gate: GateId },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    tensor: Tensor<S>,
    op: Op<S>,
}

#[derive(Debug, Default)]
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    gates: Vec<bool>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), gates: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut tensor: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        tensor.tape_id = Some(id);
        tensor.requires_grad = requires_grad;
        tensor.grad = None;
        self.nodes.push(Node { tensor, op });
        Var(id)
    }

    /// Register a tensor as a leaf; gradient tracking follows its
    /// `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> Var {
        let rg = tensor.requires_grad;
        self.push(tensor, Op::Leaf, rg)
    }

    /// Register a trainable parameter leaf.
    pub fn param(&mut self, tensor: &Tensor<S>) -> Var {
        self.push(tensor.clone(), Op::Leaf, true)
    }

    /// Register a non-differentiable constant leaf.
    pub fn constant(&mut self, tensor: Tensor<S>) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].tensor.shape
    }

    /// Gradient buffer of a node, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    /// Gradient as a tensor shaped like the node value; zeros if untouched.
    pub fn grad_tensor(&self, v: Var) -> Tensor<S> {
        let t = &self.nodes[v.0].tensor;
        match &t.grad {
            Some(g) => Tensor::new(t.shape.clone(), g.clone()),
            None => Tensor::zeros(&t.shape),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    /// Drop all accumulated gradients.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.tensor.grad = None;
        }
    }

    /// Create a gradient gate, initially open.
    pub fn new_gate(&mut self) -> GateId {
        self.gates.push(true);
        GateId(self.gates.len() - 1)
    }

    pub fn set_gate(&mut self, g: GateId, open: bool) {
        self.gates[g.0] = open;
    }

    pub fn open_all_gates(&mut self) {
        for g in &mut self.gates {
            *g = true;
        }
    }

    // ---- forward operations ------------------------------------------------

    /// Identity node whose backward pass is controlled by `gate`.
    pub fn gate(&mut self, x: Var, gate: GateId) -> Var {
        let t = self.nodes[x.0].tensor.clone();
        let rg = t.requires_grad;
        self.push(Tensor::new(t.shape, t.values), Op::Gate { x, gate }, rg)
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            ashape.len() >= 2 && bshape.len() >= 2,
            "matmul needs rank >= 2 operands, got {:?} and {:?}",
            ashape,
            bshape
        );
        let (ra, rb) = (ashape.len(), bshape.len());
        let (m, ka) = (ashape[ra - 2], ashape[ra - 1]);
        let (kb, n) = (bshape[rb - 2], bshape[rb - 1]);
        assert_eq!(ka, kb, "matmul inner dimensions disagree: {:?} x {:?}", ashape, bshape);
        let batch = broadcast_shape(&ashape[..ra - 2], &bshape[..rb - 2]);
        let mut out_shape = batch.clone();
        out_shape.extend_from_slice(&[m, n]);

        let av = &self.nodes[a.0].tensor.values;
        let bv = &self.nodes[b.0].tensor.values;
        let mut out = vec![S::zero(); out_shape.iter().product()];
        if rb == 2 {
            // Shared rhs: fold every leading lhs dim into the row count.
            kernel_mm(av, bv, &mut out, av.len() / ka, ka, n);
        } else {
            let a_it = BroadcastIter::new(&ashape[..ra - 2], &batch);
            let b_it = BroadcastIter::new(&bshape[..rb - 2], &batch);
            for (c, (ai, bi)) in a_it.zip(b_it).enumerate() {
                kernel_mm(
                    &av[ai * m * ka..ai * m * ka + m * ka],
                    &bv[bi * kb * n..bi * kb * n + kb * n],
                    &mut out[c * m * n..(c + 1) * m * n],
                    m,
                    ka,
                    n,
                );
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(Tensor::new(out_shape, out), Op::Matmul(a, b), rg)
    }

    /// a @ b^T over the trailing axes: a [..., m, k] x b [..., n, k] ->
    /// [..., m, n]. Equivalent to `matmul(a, transpose(b))` without
    /// materializing the transpose; the row-dot kernel is also what
    /// attention scores want.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            ashape.len() >= 2 && bshape.len() >= 2,
            "matmul_bt needs rank >= 2 operands, got {:?} and {:?}",
            ashape,
            bshape
        );
        let (ra, rb) = (ashape.len(), bshape.len());
        let (m, ka) = (ashape[ra - 2], ashape[ra - 1]);
        let (n, kb) = (bshape[rb - 2], bshape[rb - 1]);
        assert_eq!(ka, kb, "matmul_bt trailing dimensions disagree: {:?} x {:?}", ashape, bshape);
        let batch = broadcast_shape(&ashape[..ra - 2], &bshape[..rb - 2]);
        let mut out_shape = batch.clone();
        out_shape.extend_from_slice(&[m, n]);

        let av = &self.nodes[a.0].tensor.values;
        let bv = &self.nodes[b.0].tensor.values;
        let mut out = vec![S::zero(); out_shape.iter().product()];
        if rb == 2 {
            kernel_mm_abt(av, bv, &mut out, av.len() / ka, ka, n);
        } else {
            let a_it = BroadcastIter::new(&ashape[..ra - 2], &batch);
            let b_it = BroadcastIter::new(&bshape[..rb - 2], &batch);
            for (c, (ai, bi)) in a_it.zip(b_it).enumerate() {
                kernel_mm_abt(
                    &av[ai * m * ka..ai * m * ka + m * ka],
                    &bv[bi * n * kb..bi * n * kb + n * kb],
                    &mut out[c * m * n..(c + 1) * m * n],
                    m,
                    ka,
                    n,
                );
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(Tensor::new(out_shape, out), Op::MatmulBt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// a - b, recorded as add(a, scale(b, -1)).
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, S::from_f64(-1.0));
        self.add(a, nb)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Var {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&ashape, &bshape);
        let av = &self.nodes[a.0].tensor.values;
        let bv = &self.nodes[b.0].tensor.values;
        let out = if ashape == bshape {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else if out_shape == ashape && is_suffix_shape(&bshape, &ashape) {
            let mut out = Vec::with_capacity(av.len());
            for chunk in av.chunks(bv.len()) {
                out.extend(chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)));
            }
            out
        } else {
            let ai = BroadcastIter::new(&ashape, &out_shape);
            let bi = BroadcastIter::new(&bshape, &out_shape);
            ai.zip(bi).map(|(i, j)| f(av[i], bv[j])).collect()
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(Tensor::new(out_shape, out), op, rg)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let t = &self.nodes[a.0].tensor;
        let out = Tensor::new(t.shape.clone(), t.values.iter().map(|&v| v * c).collect());
        let rg = t.requires_grad;
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let t = &self.nodes[a.0].tensor;
        let out = Tensor::new(t.shape.clone(), t.values.iter().map(|&v| v + c).collect());
        let rg = t.requires_grad;
        self.push(out, Op::AddScalar(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| if v > S::zero() { v } else { S::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid_scalar, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.tanh(), Op::Tanh(a))
    }

    fn unary(&mut self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let t = &self.nodes[a.0].tensor;
        let out = Tensor::new(t.shape.clone(), t.values.iter().map(|&v| f(v)).collect());
        let rg = t.requires_grad;
        self.push(out, op, rg)
    }

    /// Softmax along `axis`. Masked positions are excluded before
    /// normalization and get weight exactly 0; a fully-masked slice yields
    /// all zeros rather than NaN, so padding-only attention rows stay inert.
    pub fn softmax(&mut self, x: Var, axis: usize, mask: Option<Rc<Mask>>) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(axis < shape.len(), "softmax axis {} out of range for shape {:?}", axis, shape);
        if let Some(m) = mask.as_ref() {
            assert_eq!(
                broadcast_shape(&m.shape, &shape),
                shape,
                "mask shape {:?} does not broadcast to input shape {:?}",
                m.shape,
                shape
            );
        }

        let xv = &self.nodes[x.0].tensor.values;
        let mut out = vec![S::zero(); xv.len()];
        let (outer, len, inner) = axis_split(&shape, axis);
        if inner == 1 {
            // Contiguous slices along the last axis; the mask is indexed per
            // slice through its broadcast strides instead of materializing.
            let mask_rows = mask.as_ref().map(|m| {
                let rank = shape.len();
                let mut padded = vec![1usize; rank];
                padded[rank - m.shape.len()..].copy_from_slice(&m.shape);
                let m_last = padded[rank - 1];
                assert!(m_last == len || m_last == 1);
                (BroadcastIter::new(&padded[..rank - 1], &shape[..rank - 1]), m_last)
            });
            match mask_rows {
                None => {
                    for (row_out, row) in out.chunks_mut(len).zip(xv.chunks(len)) {
                        softmax_slice(row, None, row_out);
                    }
                }
                Some((iter, m_last)) => {
                    let m = mask.as_ref().unwrap();
                    for ((row_out, row), base) in out.chunks_mut(len).zip(xv.chunks(len)).zip(iter)
                    {
                        let keep = &m.keep[base * m_last..(base + 1) * m_last];
                        softmax_slice(row, Some(keep), row_out);
                    }
                }
            }
        } else {
            let keep: Option<Vec<bool>> = mask
                .as_ref()
                .map(|m| BroadcastIter::new(&m.shape, &shape).map(|i| m.keep[i]).collect());
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let kept = |j: usize| keep.as_ref().is_none_or(|k| k[at(j)]);
                    let mut mx = S::neg_infinity();
                    for j in 0..len {
                        if kept(j) && xv[at(j)] > mx {
                            mx = xv[at(j)];
                        }
                    }
                    if mx == S::neg_infinity() {
                        continue; // fully masked: zeros
                    }
                    let mut sum = S::zero();
                    for j in 0..len {
                        if kept(j) {
                            let e = (xv[at(j)] - mx).exp();
                            out[at(j)] = e;
                            sum = sum + e;
                        }
                    }
                    for j in 0..len {
                        out[at(j)] = out[at(j)] / sum;
                    }
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push(Tensor::new(shape, out), Op::Softmax { x, axis }, rg)
    }

    /// Numerically stable log-softmax along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(axis < shape.len(), "log_softmax axis {} out of range for shape {:?}", axis, shape);
        let xv = &self.nodes[x.0].tensor.values;
        let mut out = vec![S::zero(); xv.len()];
        let (outer, len, inner) = axis_split(&shape, axis);
        if inner == 1 {
            for (row_out, row) in out.chunks_mut(len).zip(xv.chunks(len)) {
                let mut mx = S::neg_infinity();
                for &v in row {
                    if v > mx {
                        mx = v;
                    }
                }
                let mut sum = S::zero();
                for &v in row {
                    sum = sum + (v - mx).exp();
                }
                let lse = mx + sum.ln();
                for (o, &v) in row_out.iter_mut().zip(row) {
                    *o = v - lse;
                }
            }
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let mut mx = S::neg_infinity();
                    for j in 0..len {
                        if xv[at(j)] > mx {
                            mx = xv[at(j)];
                        }
                    }
                    let mut sum = S::zero();
                    for j in 0..len {
                        sum = sum + (xv[at(j)] - mx).exp();
                    }
                    let lse = mx + sum.ln();
                    for j in 0..len {
                        out[at(j)] = xv[at(j)] - lse;
                    }
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push(Tensor::new(shape, out), Op::LogSoftmax { x, axis }, rg)
    }

    /// Layer normalization over the last axis with affine scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("layer_norm on rank-0 tensor");
        assert_eq!(self.shape(gamma), &[d], "layer_norm gamma shape {:?} vs feature dim {}", self.shape(gamma), d);
        assert_eq!(self.shape(beta), &[d], "layer_norm beta shape {:?} vs feature dim {}", self.shape(beta), d);
        assert!(eps >= S::zero(), "layer_norm eps must be nonnegative");

        let xv = &self.nodes[x.0].tensor.values;
        let gv = &self.nodes[gamma.0].tensor.values;
        let bv = &self.nodes[beta.0].tensor.values;
        let mut out = vec![S::zero(); xv.len()];
        let inv_d = S::from_usize(d).recip();
        for (row_out, row) in out.chunks_mut(d).zip(xv.chunks(d)) {
            let mut mean = S::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean * inv_d;
            let mut var = S::zero();
            for &v in row {
                let c = v - mean;
                var = var + c * c;
            }
            var = var * inv_d;
            let inv_std = (var + eps).sqrt().recip();
            for k in 0..d {
                row_out[k] = gv[k] * ((row[k] - mean) * inv_std) + bv[k];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        self.push(Tensor::new(shape, out), Op::LayerNorm { x, gamma, beta, eps }, rg)
    }

    /// Sum of all elements, as a shape-[1] tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].tensor;
        let mut s = S::zero();
        for &v in &t.values {
            s = s + v;
        }
        let rg = t.requires_grad;
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = &self.nodes[a.0].tensor;
        let numel: usize = shape.iter().product();
        assert_eq!(numel, t.numel(), "reshape from {:?} to {:?} changes element count", t.shape, shape);
        let out = Tensor::new(shape.to_vec(), t.values.clone());
        let rg = t.requires_grad;
        self.push(out, Op::Reshape(a), rg)
    }

    /// Materialized axis permutation.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let in_shape = self.shape(a).to_vec();
        let rank = in_shape.len();
        assert_eq!(axes.len(), rank, "permute axes {:?} vs rank {}", axes, rank);
        let mut seen = vec![false; rank];
        for &ax in axes {
            assert!(ax < rank && !seen[ax], "permute axes {:?} are not a permutation", axes);
            seen[ax] = true;
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| in_shape[ax]).collect();
        let av = &self.nodes[a.0].tensor.values;
        let mut out = vec![S::zero(); av.len()];
        permute_copy(av, &in_shape, axes, &out_shape, &mut out, false);
        let rg = self.requires_grad(a);
        self.push(Tensor::new(out_shape, out), Op::Permute { x: a, axes: axes.to_vec() }, rg)
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Var {
        let rank = self.shape(a).len();
        assert!(rank >= 2, "transpose needs rank >= 2, got {:?}", self.shape(a));
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    /// Row lookup: out[i, :] = table[ids[i], :].
    pub fn gather(&mut self, table: Var, ids: Rc<Vec<usize>>) -> Var {
        let tshape = self.shape(table).to_vec();
        assert_eq!(tshape.len(), 2, "gather table must be rank 2, got {:?}", tshape);
        let (rows, d) = (tshape[0], tshape[1]);
        let tv = &self.nodes[table.0].tensor.values;
        let mut out = Vec::with_capacity(ids.len() * d);
        for (pos, &id) in ids.iter().enumerate() {
            assert!(id < rows, "gather id {} at position {} exceeds table rows {}", id, pos, rows);
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.requires_grad(table);
        self.push(Tensor::new(vec![ids.len(), d], out), Op::Gather { table, ids }, rg)
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulate d(loss)/d(node) into every tracked node at or below `loss`.
    /// Repeated calls each contribute one full gradient; `zero_grads` resets.
    pub fn backward(&mut self, loss: Var) {
        {
            let t = &self.nodes[loss.0].tensor;
            assert_eq!(t.numel(), 1, "backward needs a scalar loss, got shape {:?}", t.shape);
            assert!(t.requires_grad, "backward on a loss with no tracked parameters upstream");
        }
        // Per-call working buffers keep repeated backward calls independent;
        // the persistent grads only ever receive finished contributions.
        let mut work: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        work[loss.0] = Some(vec![S::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = work[id].take() else { continue };
            self.backprop_node(id, &g, &mut work);
            let t = &mut self.nodes[id].tensor;
            let numel = t.numel();
            let buf = t.grad.get_or_insert_with(|| vec![S::zero(); numel]);
            for (b, &c) in buf.iter_mut().zip(&g) {
                *b = *b + c;
            }
        }
    }

    fn backprop_node(&self, id: usize, g: &[S], work: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[id];
        let out_shape = &node.tensor.shape;
        let out_vals = &node.tensor.values;
        let nodes = &self.nodes;

        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (ashape, bshape) = (&nodes[a.0].tensor.shape, &nodes[b.0].tensor.shape);
                let (ra, rb) = (ashape.len(), bshape.len());
                let (m, k) = (ashape[ra - 2], ashape[ra - 1]);
                let n = bshape[rb - 1];
                let batch = &out_shape[..out_shape.len() - 2];
                let av = &nodes[a.0].tensor.values;
                let bv = &nodes[b.0].tensor.values;
                if nodes[a.0].tensor.requires_grad {
                    let mut da = vec![S::zero(); nodes[a.0].tensor.numel()];
                    if rb == 2 {
                        kernel_mm_abt(g, bv, &mut da, av.len() / k, n, k);
                    } else {
                        let a_it = BroadcastIter::new(&ashape[..ra - 2], batch);
                        let b_it = BroadcastIter::new(&bshape[..rb - 2], batch);
                        for (c, (ai, bi)) in a_it.zip(b_it).enumerate() {
                            kernel_mm_abt(
                                &g[c * m * n..(c + 1) * m * n],
                                &bv[bi * k * n..bi * k * n + k * n],
                                &mut da[ai * m * k..ai * m * k + m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                    add_work(work, nodes, *a, da);
                }
                if nodes[b.0].tensor.requires_grad {
                    let mut db = vec![S::zero(); nodes[b.0].tensor.numel()];
                    if rb == 2 {
                        kernel_mm_atb(av, g, &mut db, av.len() / k, k, n);
                    } else {
                        let a_it = BroadcastIter::new(&ashape[..ra - 2], batch);
                        let b_it = BroadcastIter::new(&bshape[..rb - 2], batch);
                        for (c, (ai, bi)) in a_it.zip(b_it).enumerate() {
                            kernel_mm_atb(
                                &av[ai * m * k..ai * m * k + m * k],
                                &g[c * m * n..(c + 1) * m * n],
                                &mut db[bi * k * n..bi * k * n + k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                    add_work(work, nodes, *b, db);
                }
            }
            Op::MatmulBt(a, b) => {
                // out = A @ B^T; dA = dC @ B, dB = dC^T @ A.
                let (ashape, bshape) = (&nodes[a.0].tensor.shape, &nodes[b.0].tensor.shape);
                let (ra, rb) = (ashape.len(), bshape.len());
                let (m, k) = (ashape[ra - 2], ashape[ra - 1]);
                let n = bshape[rb - 2];
                let batch = &out_shape[..out_shape.len() - 2];
                let av = &nodes[a.0].tensor.values;
                let bv = &nodes[b.0].tensor.values;
                if nodes[a.0].tensor.requires_grad {
                    let mut da = vec![S::zero(); nodes[a.0].tensor.numel()];
                    if rb == 2 {
                        kernel_mm(g, bv, &mut da, av.len() / k, n, k);
                    } else {
                        let a_it = BroadcastIter::new(&ashape[..ra - 2], batch);
                        let b_it = BroadcastIter::new(&bshape[..rb - 2], batch);
                        for (c, (ai, bi)) in a_it.zip(b_it).enumerate() {
                            kernel_mm(
                                &g[c * m * n..(c + 1) * m * n],
                                &bv[bi * n * k..bi * n * k + n * k],
                                &mut da[ai * m * k..ai * m * k + m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                    add_work(work, nodes, *a, da);
                }
                if nodes[b.0].tensor.requires_grad {
                    let mut db = vec![S::zero(); nodes[b.0].tensor.numel()];
                    if rb == 2 {
                        kernel_mm_atb(g, av, &mut db, av.len() / k, n, k);
                    } else {
                        let a_it = BroadcastIter::new(&ashape[..ra - 2], batch);
                        let b_it = BroadcastIter::new(&bshape[..rb - 2], batch);
                        for (c, (ai, bi)) in a_it.zip(b_it).enumerate() {
                            kernel_mm_atb(
                                &g[c * m * n..(c + 1) * m * n],
                                &av[ai * m * k..ai * m * k + m * k],
                                &mut db[bi * n * k..bi * n * k + n * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                    add_work(work, nodes, *b, db);
                }
            }
            Op::Add(a, b) => {
                for &side in &[*a, *b] {
                    if nodes[side.0].tensor.requires_grad {
                        let contrib = reduce_to_shape(g, out_shape, &nodes[side.0].tensor.shape);
                        add_work(work, nodes, side, contrib);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                for (target, other) in [(a, b), (b, a)] {
                    if !nodes[target.0].tensor.requires_grad {
                        continue;
                    }
                    let oshape = &nodes[other.0].tensor.shape;
                    let ov = &nodes[other.0].tensor.values;
                    let weighted: Vec<S> = if oshape == out_shape {
                        ov.iter().zip(g).map(|(&x, &gv)| x * gv).collect()
                    } else {
                        BroadcastIter::new(oshape, out_shape)
                            .zip(g)
                            .map(|(oi, &gv)| ov[oi] * gv)
                            .collect()
                    };
                    let contrib = reduce_to_shape(&weighted, out_shape, &nodes[target.0].tensor.shape);
                    add_work(work, nodes, target, contrib);
                }
            }
            Op::Scale(a, c) => {
                if nodes[a.0].tensor.requires_grad {
                    let contrib: Vec<S> = g.iter().map(|&gv| gv * *c).collect();
                    add_work(work, nodes, *a, contrib);
                }
            }
            Op::AddScalar(a, _) => {
                if nodes[a.0].tensor.requires_grad {
                    add_work(work, nodes, *a, g.to_vec());
                }
            }
            Op::Relu(a) => {
                if nodes[a.0].tensor.requires_grad {
                    let contrib: Vec<S> = nodes[a.0]
                        .tensor
                        .values
                        .iter()
                        .zip(g)
                        .map(|(&x, &gv)| if x > S::zero() { gv } else { S::zero() })
                        .collect();
                    add_work(work, nodes, *a, contrib);
                }
            }
            Op::Sigmoid(a) => {
                if nodes[a.0].tensor.requires_grad {
                    let contrib: Vec<S> =
                        out_vals.iter().zip(g).map(|(&y, &gv)| gv * y * (S::one() - y)).collect();
                    add_work(work, nodes, *a, contrib);
                }
            }
            Op::Tanh(a) => {
                if nodes[a.0].tensor.requires_grad {
                    let contrib: Vec<S> =
                        out_vals.iter().zip(g).map(|(&y, &gv)| gv * (S::one() - y * y)).collect();
                    add_work(work, nodes, *a, contrib);
                }
            }
            Op::Softmax { x, axis } => {
                if nodes[x.0].tensor.requires_grad {
                    let mut contrib = vec![S::zero(); out_vals.len()];
                    let (outer, len, inner) = axis_split(out_shape, *axis);
                    if inner == 1 {
                        for ((c, y), gr) in
                            contrib.chunks_mut(len).zip(out_vals.chunks(len)).zip(g.chunks(len))
                        {
                            let mut dot = S::zero();
                            for (&gv, &yv) in gr.iter().zip(y) {
                                dot = dot + gv * yv;
                            }
                            for ((cv, &gv), &yv) in c.iter_mut().zip(gr).zip(y) {
                                *cv = yv * (gv - dot);
                            }
                        }
                    } else {
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |j: usize| (o * len + j) * inner + i;
                                let mut dot = S::zero();
                                for j in 0..len {
                                    dot = dot + g[at(j)] * out_vals[at(j)];
                                }
                                for j in 0..len {
                                    contrib[at(j)] = out_vals[at(j)] * (g[at(j)] - dot);
                                }
                            }
                        }
                    }
                    add_work(work, nodes, *x, contrib);
                }
            }
            Op::LogSoftmax { x, axis } => {
                if nodes[x.0].tensor.requires_grad {
                    let mut contrib = vec![S::zero(); out_vals.len()];
                    let (outer, len, inner) = axis_split(out_shape, *axis);
                    if inner == 1 {
                        for ((c, y), gr) in
                            contrib.chunks_mut(len).zip(out_vals.chunks(len)).zip(g.chunks(len))
                        {
                            let mut gsum = S::zero();
                            for &gv in gr {
                                gsum = gsum + gv;
                            }
                            for ((cv, &gv), &yv) in c.iter_mut().zip(gr).zip(y) {
                                *cv = gv - yv.exp() * gsum;
                            }
                        }
                    } else {
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |j: usize| (o * len + j) * inner + i;
                                let mut gsum = S::zero();
                                for j in 0..len {
                                    gsum = gsum + g[at(j)];
                                }
                                for j in 0..len {
                                    contrib[at(j)] = g[at(j)] - out_vals[at(j)].exp() * gsum;
                                }
                            }
                        }
                    }
                    add_work(work, nodes, *x, contrib);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let d = *out_shape.last().unwrap();
                let inv_d = S::from_usize(d).recip();
                let xv = &nodes[x.0].tensor.values;
                let gv = &nodes[gamma.0].tensor.values;
                let rows = xv.len() / d;
                let mut dx = vec![S::zero(); xv.len()];
                let mut dgamma = vec![S::zero(); d];
                let mut dbeta = vec![S::zero(); d];
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mut mean = S::zero();
                    for &v in row {
                        mean = mean + v;
                    }
                    mean = mean * inv_d;
                    let mut var = S::zero();
                    for &v in row {
                        let c = v - mean;
                        var = var + c * c;
                    }
                    var = var * inv_d;
                    let inv_std = (var + eps).sqrt().recip();
                    // dy = g * gamma; dx = inv_std * (dy - mean(dy) - y * mean(dy*y))
                    let mut dy_mean = S::zero();
                    let mut dyy_mean = S::zero();
                    for k in 0..d {
                        let y = (row[k] - mean) * inv_std;
                        let dy = grow[k] * gv[k];
                        dgamma[k] = dgamma[k] + grow[k] * y;
                        dbeta[k] = dbeta[k] + grow[k];
                        dy_mean = dy_mean + dy;
                        dyy_mean = dyy_mean + dy * y;
                    }
                    dy_mean = dy_mean * inv_d;
                    dyy_mean = dyy_mean * inv_d;
                    for k in 0..d {
                        let y = (row[k] - mean) * inv_std;
                        let dy = grow[k] * gv[k];
                        dx[r * d + k] = inv_std * (dy - dy_mean - y * dyy_mean);
                    }
                }
                if nodes[x.0].tensor.requires_grad {
                    add_work(work, nodes, x, dx);
                }
                if nodes[gamma.0].tensor.requires_grad {
                    add_work(work, nodes, gamma, dgamma);
                }
                if nodes[beta.0].tensor.requires_grad {
                    add_work(work, nodes, beta, dbeta);
                }
            }
            Op::Sum(a) => {
                if nodes[a.0].tensor.requires_grad {
                    let contrib = vec![g[0]; nodes[a.0].tensor.numel()];
                    add_work(work, nodes, *a, contrib);
                }
            }
            Op::Reshape(a) => {
                if nodes[a.0].tensor.requires_grad {
                    add_work(work, nodes, *a, g.to_vec());
                }
            }
            Op::Permute { x, axes } => {
                if nodes[x.0].tensor.requires_grad {
                    let in_shape = &nodes[x.0].tensor.shape;
                    let mut contrib = vec![S::zero(); nodes[x.0].tensor.numel()];
                    permute_copy(g, in_shape, axes, out_shape, &mut contrib, true);
                    add_work(work, nodes, *x, contrib);
                }
            }
            Op::Gather { table, ids } => {
                if nodes[table.0].tensor.requires_grad {
                    let d = out_shape[1];
                    let mut contrib = vec![S::zero(); nodes[table.0].tensor.numel()];
                    for (i, &id) in ids.iter().enumerate() {
                        for k in 0..d {
                            contrib[id * d + k] = contrib[id * d + k] + g[i * d + k];
                        }
                    }
                    add_work(work, nodes, *table, contrib);
                }
            }
            Op::Gate { x, gate } => {
                if self.gates[gate.0] && nodes[x.0].tensor.requires_grad {
                    add_work(work, nodes, *x, g.to_vec());
                }
            }
        }
    }
}

/// Add a gradient contribution to a node's per-call working buffer.
fn add_work<S: Scalar>(work: &mut [Option<Vec<S>>], nodes: &[Node<S>], var: Var, contrib: Vec<S>) {
    match &mut work[var.0] {
        Some(buf) => {
            for (b, c) in buf.iter_mut().zip(contrib) {
                *b = *b + c;
            }
        }
        slot => {
            debug_assert_eq!(contrib.len(), nodes[var.0].tensor.numel());
            *slot = Some(contrib);
        }
    }
}

fn sigmoid_scalar<S: Scalar>(v: S) -> S {
    // Split on sign so exp never overflows.
    if v >= S::zero() {
        (S::one() + (-v).exp()).recip()
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Masked softmax of one contiguous slice. `keep` has the slice length or
/// length 1 (a broadcast flag for the whole slice). Fully-masked slices stay
/// zero.
fn softmax_slice<S: Scalar>(row: &[S], keep: Option<&[bool]>, out: &mut [S]) {
    let kept = |j: usize| match keep {
        None => true,
        Some(k) if k.len() == 1 => k[0],
        Some(k) => k[j],
    };
    let mut mx = S::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if kept(j) && v > mx {
            mx = v;
        }
    }
    if mx == S::neg_infinity() {
        return;
    }
    let mut sum = S::zero();
    for (j, &v) in row.iter().enumerate() {
        if kept(j) {
            let e = (v - mx).exp();
            out[j] = e;
            sum = sum + e;
        }
    }
    let inv = sum.recip();
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

/// Sum `values` (laid out as `from_shape`) down to `to_shape`, which must be
/// broadcast-compatible with it.
fn reduce_to_shape<S: Scalar>(values: &[S], from_shape: &[usize], to_shape: &[usize]) -> Vec<S> {
    if from_shape == to_shape {
        return values.to_vec();
    }
    let to_numel: usize = to_shape.iter().product();
    let mut out = vec![S::zero(); to_numel];
    if is_suffix_shape(to_shape, from_shape) {
        for chunk in values.chunks(to_numel) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o = *o + v;
            }
        }
    } else {
        for (ti, &v) in BroadcastIter::new(to_shape, from_shape).zip(values) {
            out[ti] = out[ti] + v;
        }
    }
    out
}

/// Copy with axis permutation. Forward: out[o] = input[map(o)].
/// With `invert`, scatter instead: out[map(o)] += input[o] (transposed walk).
fn permute_copy<S: Scalar>(
    src: &[S],
    in_shape: &[usize],
    axes: &[usize],
    out_shape: &[usize],
    dst: &mut [S],
    invert: bool,
) {
    // The attention head split/merge pattern (0,2,1,3) swaps the middle axes
    // of a rank-4 tensor; it is an involution, so the inverted walk is the
    // same chunked copy driven by the output shape.
    if axes == [0, 2, 1, 3] {
        let shape = if invert { out_shape } else { in_shape };
        let (d0, d1, d2, d3) = (shape[0], shape[1], shape[2], shape[3]);
        for i0 in 0..d0 {
            for i1 in 0..d1 {
                for i2 in 0..d2 {
                    let from = ((i0 * d1 + i1) * d2 + i2) * d3;
                    let to = ((i0 * d2 + i2) * d1 + i1) * d3;
                    dst[to..to + d3].copy_from_slice(&src[from..from + d3]);
                }
            }
        }
        return;
    }
    let in_strides = strides(in_shape);
    let rank = out_shape.len();
    let mapped: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
    let mut coords = vec![0usize; rank];
    let mut in_idx = 0usize;
    for out_idx in 0..dst.len() {
        if invert {
            dst[in_idx] = src[out_idx];
        } else {
            dst[out_idx] = src[in_idx];
        }
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            in_idx += mapped[ax];
            if coords[ax] < out_shape[ax] {
                break;
            }
            in_idx -= mapped[ax] * out_shape[ax];
            coords[ax] = 0;
        }
    }
}

// ---- matmul kernels (all accumulate into the output slice) -----------------

/// c += a @ b, a: m x k, b: k x n. Output tiles of 2 rows by 4 columns are
/// accumulated in registers across the whole k loop, so the c buffer is
/// touched once per tile instead of once per k step.
fn kernel_mm<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + 2 <= m {
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let mut j = 0;
        while j + 4 <= n {
            let mut t0 = [S::zero(); 4];
            let mut t1 = [S::zero(); 4];
            for p in 0..k {
                let brow = &b[p * n + j..p * n + j + 4];
                let (x0, x1) = (a0[p], a1[p]);
                for q in 0..4 {
                    t0[q] = t0[q] + x0 * brow[q];
                    t1[q] = t1[q] + x1 * brow[q];
                }
            }
            let c0 = &mut c[i * n + j..i * n + j + 4];
            for q in 0..4 {
                c0[q] = c0[q] + t0[q];
            }
            let c1 = &mut c[(i + 1) * n + j..(i + 1) * n + j + 4];
            for q in 0..4 {
                c1[q] = c1[q] + t1[q];
            }
            j += 4;
        }
        while j < n {
            let mut t0 = S::zero();
            let mut t1 = S::zero();
            for p in 0..k {
                t0 = t0 + a0[p] * b[p * n + j];
                t1 = t1 + a1[p] * b[p * n + j];
            }
            c[i * n + j] = c[i * n + j] + t0;
            c[(i + 1) * n + j] = c[(i + 1) * n + j] + t1;
            j += 1;
        }
        i += 2;
    }
    if i < m {
        let arow = &a[i * k..(i + 1) * k];
        let mut j = 0;
        while j + 4 <= n {
            let mut t0 = [S::zero(); 4];
            for p in 0..k {
                let brow = &b[p * n + j..p * n + j + 4];
                let x = arow[p];
                for q in 0..4 {
                    t0[q] = t0[q] + x * brow[q];
                }
            }
            let c0 = &mut c[i * n + j..i * n + j + 4];
            for q in 0..4 {
                c0[q] = c0[q] + t0[q];
            }
            j += 4;
        }
        while j < n {
            let mut t0 = S::zero();
            for p in 0..k {
                t0 = t0 + arow[p] * b[p * n + j];
            }
            c[i * n + j] = c[i * n + j] + t0;
            j += 1;
        }
    }
}

/// c += a @ b^T, a: m x n, b: k x n, c: m x k. The dot product runs four
/// independent accumulators so the reduction vectorizes.
fn kernel_mm_abt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (p, cv) in crow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let chunks = n / 4;
            let mut acc = [S::zero(); 4];
            for q in 0..chunks {
                let x = &arow[q * 4..q * 4 + 4];
                let y = &brow[q * 4..q * 4 + 4];
                acc[0] = acc[0] + x[0] * y[0];
                acc[1] = acc[1] + x[1] * y[1];
                acc[2] = acc[2] + x[2] * y[2];
                acc[3] = acc[3] + x[3] * y[3];
            }
            let mut dot = (acc[0] + acc[1]) + (acc[2] + acc[3]);
            for q in chunks * 4..n {
                dot = dot + arow[q] * brow[q];
            }
            *cv = *cv + dot;
        }
    }
}

/// c += a^T @ b, a: m x k, b: m x n, c: k x n. Each 4-wide block of an
/// output row accumulates over the full m loop in registers.
fn kernel_mm_atb<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let crow = &mut c[p * n..(p + 1) * n];
        let mut j = 0;
        while j + 4 <= n {
            let mut t = [S::zero(); 4];
            for i in 0..m {
                let av = a[i * k + p];
                let brow = &b[i * n + j..i * n + j + 4];
                for q in 0..4 {
                    t[q] = t[q] + av * brow[q];
                }
            }
            for q in 0..4 {
                crow[j + q] = crow[j + q] + t[q];
            }
            j += 4;
        }
        while j < n {
            let mut t = S::zero();
            for i in 0..m {
                t = t + a[i * k + p] * b[i * n + j];
            }
            crow[j] = crow[j] + t;
            j += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, vals)
    }

    // Independent oracle: plain ijk triple loop, no batching, no reuse of the
    // production kernel's loop order.
    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.matmul(i2, x);
        assert_eq!(tape.value(y).values, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        let mut rng = crate::rng::Rng::new(5);
        for _ in 0..20 {
            let (m, k, n) = (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4));
            let av: Vec<f64> = (0..m * k).map(|_| rng.range(-2.0, 2.0)).collect();
            let bv: Vec<f64> = (0..k * n).map(|_| rng.range(-2.0, 2.0)).collect();
            let expect = naive_matmul(&av, &bv, m, k, n);
            let mut tape = Tape::new();
            let a = tape.constant(t(&[m, k], &av));
            let b = tape.constant(t(&[k, n], &bv));
            let c = tape.matmul(a, b);
            for (got, want) in tape.value(c).values.iter().zip(&expect) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_fixed_case() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b);
        // Frozen from the naive triple-loop oracle.
        assert_eq!(tape.value(c).values, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    #[should_panic(expected = "inner dimensions disagree")]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 3]));
        tape.matmul(a, b);
    }

    #[test]
    fn matmul_broadcasts_leading_dims() {
        // (2,2,3) @ (3,2): rhs shared across the batch.
        let mut tape = Tape::new();
        let av: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let a = tape.constant(t(&[2, 2, 3], &av));
        let b = tape.constant(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let c = tape.matmul(a, b);
        assert_eq!(tape.shape(c), &[2, 2, 2]);
        let naive0 = naive_matmul(&av[..6], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0], 2, 3, 2);
        assert_eq!(&tape.value(c).values[..4], &naive0[..]);
    }

    #[test]
    fn matmul_bt_equals_matmul_of_transpose() {
        let mut rng = crate::rng::Rng::new(29);
        let av: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.range(-1.0, 1.0)).collect();
        let bv: Vec<f64> = (0..2 * 5 * 4).map(|_| rng.range(-1.0, 1.0)).collect();
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3, 4], &av));
        let b = tape.constant(t(&[2, 5, 4], &bv));
        let direct = tape.matmul_bt(a, b);
        let bt = tape.transpose(b);
        let via_transpose = tape.matmul(a, bt);
        assert_eq!(tape.shape(direct), &[2, 3, 5]);
        // The kernels accumulate in different orders, so exact equality is
        // not expected, only agreement to rounding.
        for (x, y) in tape.value(direct).values.iter().zip(&tape.value(via_transpose).values) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_uniform_input() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
        let y = tape.softmax(x, 0, None);
        for v in &tape.value(y).values {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_analytic_case() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, (2.0f64).ln()]));
        let y = tape.softmax(x, 0, None);
        let v = &tape.value(y).values;
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((v[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = crate::rng::Rng::new(7);
        let vals: Vec<f64> = (0..5).map(|_| rng.range(-3.0, 3.0)).collect();
        let shifted: Vec<f64> = vals.iter().map(|v| v + 123.456).collect();
        let mut tape = Tape::new();
        let a = tape.constant(t(&[5], &vals));
        let b = tape.constant(t(&[5], &shifted));
        let ya = tape.softmax(a, 0, None);
        let yb = tape.softmax(b, 0, None);
        for (x, y) in tape.value(ya).values.iter().zip(&tape.value(yb).values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = crate::rng::Rng::new(11);
        let vals: Vec<f64> = (0..24).map(|_| rng.range(-4.0, 4.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3, 4], &vals));
        let y = tape.softmax(x, 2, None);
        for row in tape.value(y).values.chunks(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row sum {}", s);
        }
    }

    #[test]
    fn softmax_fully_masked_slice_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let mask = Mask::new(vec![2, 3], vec![true, false, true, false, false, false]);
        let y = tape.softmax(x, 1, Some(Rc::new(mask)));
        let v = &tape.value(y).values;
        // Row 0: renormalized over positions 0 and 2; masked key exactly 0.
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
        // Row 1 fully masked: all zeros, no NaN.
        assert_eq!(&v[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[5.0; 6]));
        let gamma = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
        let beta = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.layer_norm(x, gamma, beta, 1e-6);
        for v in &tape.value(y).values {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_standardized_input_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, -1.0]));
        let gamma = tape.constant(t(&[2], &[1.0, 1.0]));
        let beta = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.layer_norm(x, gamma, beta, 0.0);
        let v = &tape.value(y).values;
        assert!((v[0] - 1.0).abs() < 1e-15);
        assert!((v[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_zero_gamma_yields_beta() {
        let mut rng = crate::rng::Rng::new(3);
        let vals: Vec<f64> = (0..8).map(|_| rng.range(-2.0, 2.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 4], &vals));
        let gamma = tape.constant(Tensor::zeros(&[4]));
        let beta = tape.constant(t(&[4], &[0.5, -1.0, 2.0, 0.0]));
        let y = tape.layer_norm(x, gamma, beta, 1e-6);
        for row in tape.value(y).values.chunks(4) {
            assert_eq!(row, &[0.5, -1.0, 2.0, 0.0]);
        }
    }

    #[test]
    fn layer_norm_standardizes_last_dim() {
        let mut rng = crate::rng::Rng::new(19);
        let d = 16;
        let vals: Vec<f64> = (0..4 * d).map(|_| rng.range(-3.0, 3.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4, d], &vals));
        let gamma = tape.constant(Tensor::full(&[d], 1.0));
        let beta = tape.constant(Tensor::zeros(&[d]));
        let y = tape.layer_norm(x, gamma, beta, 1e-6);
        for row in tape.value(y).values.chunks(d) {
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-10, "mean {}", mean);
            assert!((var - 1.0).abs() < 1e-6, "var {}", var);
        }
    }

    #[test]
    fn elementwise_fixed_points() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).values, vec![0.0, 0.0, 2.0]);
        let z = tape.constant(t(&[1], &[0.0]));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).values, vec![0.5]);
        let th = tape.tanh(z);
        assert_eq!(tape.value(th).values, vec![0.0]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[4.0, 5.0, 6.0]).requires_grad());
        let loss = tape.sum(x);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]).requires_grad());
        let sq = tape.mul(x, x);
        let loss = tape.sum(sq);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).requires_grad());
        tape.backward(x);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).requires_grad());
        let loss = tape.sum(x);
        tape.backward(loss);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
        tape.zero_grads();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn gate_blocks_gradient_when_closed() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).requires_grad());
        let gate = tape.new_gate();
        let gx = tape.gate(x, gate);
        let loss = tape.sum(gx);
        // Forward is unaffected either way.
        assert_eq!(tape.value(gx).values, vec![1.0, 2.0]);
        tape.set_gate(gate, false);
        tape.backward(loss);
        assert!(tape.grad(x).is_none());
        tape.set_gate(gate, true);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn gather_scatters_gradient_rows() {
        let mut tape = Tape::new();
        let table = tape.leaf(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).requires_grad());
        let out = tape.gather(table, Rc::new(vec![2, 0, 2]));
        assert_eq!(tape.value(out).values, vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum(out);
        tape.backward(loss);
        assert_eq!(tape.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    #[should_panic(expected = "position 1 exceeds")]
    fn gather_rejects_out_of_range_id() {
        let mut tape: Tape<f64> = Tape::new();
        let table = tape.constant(Tensor::zeros(&[3, 2]));
        tape.gather(table, Rc::new(vec![0, 7]));
    }

    #[test]
    fn permute_roundtrip() {
        let mut rng = crate::rng::Rng::new(23);
        let vals: Vec<f64> = (0..24).map(|_| rng.range(-1.0, 1.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3, 4], &vals));
        let p = tape.permute(x, &[2, 0, 1]);
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        let back = tape.permute(p, &[1, 2, 0]);
        assert_eq!(tape.value(back).values, vals);
    }

    #[test]
    fn f32_tape_runs() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(Tensor::<f32>::from_f64(&[2], &[0.5, -0.5]).requires_grad());
        let y = tape.mul(x, x);
        let loss = tape.sum(y);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap(), &[1.0f32, -1.0]);
    }
}
