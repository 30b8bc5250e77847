//! Reverse-mode autodiff over a flat op tape.
//!
//! A [`Tape`] records one forward computation as an append-only list of
//! nodes; parent links always point at earlier nodes, so creation order
//! is a topological order and the backward pass is a single reverse
//! sweep that visits each node at most once. Gradients for named
//! parameters come back as a [`GradMap`] so callers control when and in
//! what order they land in a [`ParamStore`] — that is what keeps
//! data-parallel training (one tape per batch item) deterministic.
//!
//! A tape must not be shared across threads while ops are being
//! recorded; run one tape per thread and merge the gradient maps.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::params::{GradMap, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stabilizer added inside the square root of the channel L2 norm.
pub const L2NORM_EPS: f64 = 1e-10;

/// Op payload; cached fields hold whatever forward state backward needs.
#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Input,
    Const,
    Param(ParamId),
    /// parents: `[x, w]` or `[x, w, bias]`
    Conv2d { stride: usize, pad: usize },
    /// parents: `[x, w]`
    Deconv2d { stride: usize, pad: usize },
    /// parents: `[x]`; `argmax` holds one flat input index per output.
    MaxPool2d { argmax: Vec<u32> },
    /// parents: `[x]`
    Relu,
    /// parents: `[x, gamma]`; `inv_norms` caches 1/sqrt(sum+eps) per position.
    L2Norm { inv_norms: Vec<S> },
    /// parents: `[a, b]`
    Add,
    /// parents: the concatenated inputs, in order
    ConcatChannels,
    /// parents: `[x]`; `y = mul * x + add`; only `mul` matters going backward.
    Affine { mul: S },
    /// parents: `[logits]`; summed cross-entropy over index groups.
    SoftmaxCe { groups: Vec<CeGroup>, probs: Vec<S> },
    /// parents: `[pred, target]`; elementwise over whole tensors.
    SmoothL1Pair,
    /// parents: `[pred]`; only the listed positions contribute.
    SmoothL1At { entries: Vec<(u32, S)> },
}

/// Public op classification for graph audits and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Input,
    Const,
    Param,
    Conv2d,
    Deconv2d,
    MaxPool2d,
    Relu,
    L2Norm,
    Add,
    ConcatChannels,
    Affine,
    SoftmaxCe,
    SmoothL1,
}

/// One softmax cross-entropy term: `idxs` are flat positions of the
/// class logits inside the parent tensor, `target` indexes into `idxs`.
#[derive(Debug, Clone)]
pub struct CeGroup {
    pub idxs: Vec<u32>,
    pub target: u32,
}

#[derive(Debug)]
struct Node<S: Scalar> {
    op: Op<S>,
    parents: Vec<usize>,
    value: Tensor<S>,
}

/// A recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    // ParamId -> node id, so a parameter used many times gets one leaf
    // (its gradient then accumulates across all uses).
    param_nodes: RefCell<Vec<(ParamId, usize)>>,
}

/// Handle to a tape node; cheap to copy, tied to its tape's lifetime.
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    pub id: usize,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, op: Op<S>, parents: Vec<usize>, value: Tensor<S>) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        debug_assert!(parents.iter().all(|&p| p < id), "graph must stay acyclic");
        nodes.push(Node { op, parents, value });
        Var { tape: self, id }
    }

    pub fn input(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(Op::Input, vec![], value)
    }

    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(Op::Const, vec![], value)
    }

    /// Leaf for a named parameter. Repeated calls with the same id reuse
    /// the existing leaf node.
    pub fn param(&self, store: &ParamStore<S>, id: ParamId) -> Var<'_, S> {
        if let Some(&(_, nid)) = self.param_nodes.borrow().iter().find(|(p, _)| *p == id) {
            return Var { tape: self, id: nid };
        }
        let var = self.push(Op::Param(id), vec![], store.get(id).value.clone());
        self.param_nodes.borrow_mut().push((id, var.id));
        var
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, id: usize) -> Ref<'_, Tensor<S>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    pub fn op_kind(&self, id: usize) -> OpKind {
        match self.nodes.borrow()[id].op {
            Op::Input => OpKind::Input,
            Op::Const => OpKind::Const,
            Op::Param(_) => OpKind::Param,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Deconv2d { .. } => OpKind::Deconv2d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::Relu => OpKind::Relu,
            Op::L2Norm { .. } => OpKind::L2Norm,
            Op::Add => OpKind::Add,
            Op::ConcatChannels => OpKind::ConcatChannels,
            Op::Affine { .. } => OpKind::Affine,
            Op::SoftmaxCe { .. } => OpKind::SoftmaxCe,
            Op::SmoothL1Pair | Op::SmoothL1At { .. } => OpKind::SmoothL1,
        }
    }

    pub fn parents(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].parents.clone()
    }

    /// The parameter a leaf node refers to, if any.
    pub fn param_of(&self, id: usize) -> Option<ParamId> {
        match self.nodes.borrow()[id].op {
            Op::Param(p) => Some(p),
            _ => None,
        }
    }

    /// Gradient of a scalar node w.r.t. every parameter (seed 1).
    pub fn backward(&self, root: Var<'_, S>, n_params: usize) -> Result<GradMap<S>> {
        self.backward_seeded(root, S::one(), n_params)
    }

    /// Gradient of `seed * root` w.r.t. every parameter. Used by the
    /// trainer to fold the 1/batch factor into the seed.
    pub fn backward_seeded(&self, root: Var<'_, S>, seed: S, n_params: usize) -> Result<GradMap<S>> {
        let root_len = self.value(root.id).len();
        if root_len != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got {} elements",
                root_len
            )));
        }
        let (map, _) = self.sweep(root.id, Tensor::scalar(seed), n_params, false)?;
        Ok(map)
    }

    /// Backward followed by accumulation into the store's grad buffers.
    pub fn backward_into(&self, root: Var<'_, S>, store: &mut ParamStore<S>) -> Result<()> {
        let map = self.backward(root, store.len())?;
        store.accumulate(&map)
    }

    /// Vector-Jacobian product: gradients of `sum(weights * node)` for an
    /// arbitrary (non-scalar) node. The finite-difference harness uses
    /// this to probe individual ops without wrapping them in a loss.
    pub fn vjp(&self, node: Var<'_, S>, weights: &Tensor<S>, n_params: usize) -> Result<GradMap<S>> {
        if !self.value(node.id).same_shape(weights) {
            return Err(Error::dim("vjp weights must match node shape".to_string()));
        }
        let (map, _) = self.sweep(node.id, weights.clone(), n_params, false)?;
        Ok(map)
    }

    /// Like [`vjp`](Self::vjp) but also returns the gradient tensor for
    /// every node (None where no gradient flowed).
    pub fn vjp_nodes(
        &self,
        node: Var<'_, S>,
        weights: &Tensor<S>,
    ) -> Result<Vec<Option<Tensor<S>>>> {
        if !self.value(node.id).same_shape(weights) {
            return Err(Error::dim("vjp weights must match node shape".to_string()));
        }
        let (_, nodes) = self.sweep(node.id, weights.clone(), 0, true)?;
        Ok(nodes)
    }

    /// Reverse sweep from `root`. Parent links point backwards, so one
    /// descending pass visits each reachable node exactly once, after
    /// all of its consumers.
    fn sweep(
        &self,
        root: usize,
        seed: Tensor<S>,
        n_params: usize,
        keep_nodes: bool,
    ) -> Result<(GradMap<S>, Vec<Option<Tensor<S>>>)> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; nodes.len()];
        grads[root] = Some(seed);
        let mut map = GradMap::empty(n_params);
        for id in (0..=root).rev() {
            let g = if keep_nodes {
                match &grads[id] {
                    Some(g) => g.clone(),
                    None => continue,
                }
            } else {
                match grads[id].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            let node = &nodes[id];
            match &node.op {
                Op::Input | Op::Const => {}
                Op::Param(pid) => {
                    if pid.0 < n_params {
                        map.add_to_slot(*pid, &g);
                    }
                }
                Op::Conv2d { stride, pad } => {
                    let x = &nodes[node.parents[0]].value;
                    let w = &nodes[node.parents[1]].value;
                    let gx = deconv_core(&g, w, *stride, *pad, x.shape()[2], x.shape()[3])?;
                    let gw = conv_grad_w(x, &g, *stride, *pad, w.shape()[2], w.shape()[3])?;
                    acc(&mut grads, node.parents[0], gx);
                    acc(&mut grads, node.parents[1], gw);
                    if node.parents.len() == 3 {
                        let gb = conv_grad_b(&g);
                        acc(&mut grads, node.parents[2], gb);
                    }
                }
                Op::Deconv2d { stride, pad } => {
                    let x = &nodes[node.parents[0]].value;
                    let w = &nodes[node.parents[1]].value;
                    // The deconv is the adjoint of a conv with the same
                    // kernel, so its input-gradient is that conv.
                    let gx = conv_core(&g, w, None, *stride, *pad)?;
                    debug_assert_eq!(gx.shape(), x.shape());
                    let gw = conv_grad_w(&g, x, *stride, *pad, w.shape()[2], w.shape()[3])?;
                    acc(&mut grads, node.parents[0], gx);
                    acc(&mut grads, node.parents[1], gw);
                }
                Op::MaxPool2d { argmax } => {
                    let x = &nodes[node.parents[0]].value;
                    let mut gx = Tensor::zeros(x.shape());
                    let gd = gx.data_mut();
                    for (gi, &src) in g.data().iter().zip(argmax.iter()) {
                        gd[src as usize] += *gi;
                    }
                    acc(&mut grads, node.parents[0], gx);
                }
                Op::Relu => {
                    let x = &nodes[node.parents[0]].value;
                    let mut gx = Tensor::zeros(x.shape());
                    let gd = gx.data_mut();
                    for i in 0..gd.len() {
                        if x.data()[i] > S::zero() {
                            gd[i] = g.data()[i];
                        }
                    }
                    acc(&mut grads, node.parents[0], gx);
                }
                Op::L2Norm { inv_norms } => {
                    let x = &nodes[node.parents[0]].value;
                    let gamma = &nodes[node.parents[1]].value;
                    let (gx, ggamma) = l2norm_backward(x, gamma, inv_norms, &g);
                    acc(&mut grads, node.parents[0], gx);
                    acc(&mut grads, node.parents[1], ggamma);
                }
                Op::Add => {
                    acc(&mut grads, node.parents[0], g.clone());
                    acc(&mut grads, node.parents[1], g);
                }
                Op::ConcatChannels => {
                    let (b, _, h, w) = node.value.dims4().expect("concat output rank");
                    let plane = h * w;
                    let out_c = node.value.shape()[1];
                    let mut c_off = 0;
                    for &p in &node.parents {
                        let pc = nodes[p].value.shape()[1];
                        let mut gp = Tensor::zeros(nodes[p].value.shape());
                        let gpd = gp.data_mut();
                        for bi in 0..b {
                            for ci in 0..pc {
                                let src = ((bi * out_c) + c_off + ci) * plane;
                                let dst = ((bi * pc) + ci) * plane;
                                gpd[dst..dst + plane]
                                    .iter_mut()
                                    .zip(&g.data()[src..src + plane])
                                    .for_each(|(d, s)| *d += *s);
                            }
                        }
                        acc(&mut grads, p, gp);
                        c_off += pc;
                    }
                }
                Op::Affine { mul } => {
                    let mut gx = g.clone();
                    for v in gx.data_mut() {
                        *v *= *mul;
                    }
                    acc(&mut grads, node.parents[0], gx);
                }
                Op::SoftmaxCe { groups, probs } => {
                    let x = &nodes[node.parents[0]].value;
                    let mut gx = Tensor::zeros(x.shape());
                    let gd = gx.data_mut();
                    let gscale = g.item();
                    let mut off = 0;
                    for grp in groups {
                        for (k, &idx) in grp.idxs.iter().enumerate() {
                            let p = probs[off + k];
                            let delta = if k as u32 == grp.target { S::one() } else { S::zero() };
                            gd[idx as usize] += gscale * (p - delta);
                        }
                        off += grp.idxs.len();
                    }
                    acc(&mut grads, node.parents[0], gx);
                }
                Op::SmoothL1Pair => {
                    let pred = &nodes[node.parents[0]].value;
                    let target = &nodes[node.parents[1]].value;
                    let gscale = g.item();
                    let mut gp = Tensor::zeros(pred.shape());
                    let mut gt = Tensor::zeros(target.shape());
                    for i in 0..pred.len() {
                        let d = pred.data()[i] - target.data()[i];
                        let s = gscale * smooth_l1_slope(d);
                        gp.data_mut()[i] = s;
                        gt.data_mut()[i] = -s;
                    }
                    acc(&mut grads, node.parents[0], gp);
                    acc(&mut grads, node.parents[1], gt);
                }
                Op::SmoothL1At { entries } => {
                    let pred = &nodes[node.parents[0]].value;
                    let gscale = g.item();
                    let mut gp = Tensor::zeros(pred.shape());
                    for &(idx, t) in entries {
                        let d = pred.data()[idx as usize] - t;
                        gp.data_mut()[idx as usize] += gscale * smooth_l1_slope(d);
                    }
                    acc(&mut grads, node.parents[0], gp);
                }
            }
        }
        Ok((map, grads))
    }
}

fn acc<S: Scalar>(grads: &mut [Option<Tensor<S>>], id: usize, g: Tensor<S>) {
    match &mut grads[id] {
        Some(t) => t.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn smooth_l1_slope<S: Scalar>(d: S) -> S {
    if d.abs() < S::one() {
        d
    } else if d > S::zero() {
        S::one()
    } else {
        -S::one()
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn value(&self) -> Ref<'t, Tensor<S>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn value_clone(&self) -> Tensor<S> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// 2-D cross-correlation, `x: BxCxHxW`, `w: OxCxKhxKw`, optional bias
    /// of length `O`. Output `B x O x Ho x Wo` with
    /// `Ho = (H + 2*pad - Kh)/stride + 1` (floor).
    pub fn conv2d(self, w: Var<'t, S>, bias: Option<Var<'t, S>>, stride: usize, pad: usize) -> Result<Var<'t, S>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let wt = &nodes[w.id].value;
            let b = bias.map(|b| &nodes[b.id].value);
            conv_core(x, wt, b, stride, pad)?
        };
        let mut parents = vec![self.id, w.id];
        if let Some(b) = bias {
            parents.push(b.id);
        }
        Ok(self.tape.push(Op::Conv2d { stride, pad }, parents, out))
    }

    /// Transposed convolution, the exact adjoint of [`conv2d`](Self::conv2d)
    /// with the same kernel tensor, stride, and pad. `x: BxCxHxW`,
    /// `w: CxOxKhxKw` (first kernel axis is the *input* channel). Output
    /// `B x O x Ho x Wo` with `Ho = (H-1)*stride + Kh - 2*pad`.
    pub fn deconv2d(self, w: Var<'t, S>, stride: usize, pad: usize) -> Result<Var<'t, S>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let wt = &nodes[w.id].value;
            let (_, _, h, wd) = x.dims4()?;
            let (kc, _, kh, kw) = wt.dims4()?;
            if kc != x.shape()[1] {
                return Err(Error::dim(format!(
                    "deconv kernel expects {} input channels, tensor has {}",
                    kc,
                    x.shape()[1]
                )));
            }
            let oh = ((h - 1) * stride + kh).checked_sub(2 * pad);
            let ow = ((wd - 1) * stride + kw).checked_sub(2 * pad);
            match (oh, ow) {
                (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => {
                    deconv_core(x, wt, stride, pad, oh, ow)?
                }
                _ => return Err(Error::dim("deconv output would be empty".to_string())),
            }
        };
        Ok(self.tape.push(Op::Deconv2d { stride, pad }, vec![self.id, w.id], out))
    }

    /// Max pooling; ties go to the first element in row-major scan order.
    pub fn maxpool2d(self, window: usize, stride: usize) -> Result<Var<'t, S>> {
        let (out, argmax) = {
            let nodes = self.tape.nodes.borrow();
            maxpool_core(&nodes[self.id].value, window, stride)?
        };
        Ok(self.tape.push(Op::MaxPool2d { argmax }, vec![self.id], out))
    }

    /// Elementwise `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(self) -> Var<'t, S> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let mut y = x.clone();
            for v in y.data_mut() {
                if !(*v > S::zero()) {
                    *v = S::zero();
                }
            }
            y
        };
        self.tape.push(Op::Relu, vec![self.id], out)
    }

    /// Per-position channel L2 normalization with a learned per-channel
    /// scale: `y[c] = gamma[c] * x[c] / sqrt(sum_c x[c]^2 + eps)`.
    pub fn l2norm_channels(self, gamma: Var<'t, S>) -> Result<Var<'t, S>> {
        let eps = S::fromf(L2NORM_EPS);
        let (out, inv_norms) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let gm = &nodes[gamma.id].value;
            let (_, c, _, _) = x.dims4()?;
            if gm.rank() != 1 || gm.len() != c {
                return Err(Error::dim(format!(
                    "l2norm scale must have length {}, got {:?}",
                    c,
                    gm.shape()
                )));
            }
            l2norm_forward(x, gm, eps)
        };
        Ok(self
            .tape
            .push(Op::L2Norm { inv_norms }, vec![self.id, gamma.id], out))
    }

    pub fn add(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            if !a.same_shape(b) {
                return Err(Error::dim(format!(
                    "add shapes differ: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let mut y = a.clone();
            y.add_assign(b);
            y
        };
        Ok(self.tape.push(Op::Add, vec![self.id, other.id], out))
    }

    /// `y = mul * x + add`, elementwise with scalar coefficients.
    pub fn affine(self, mul: S, add: S) -> Var<'t, S> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let mut y = x.clone();
            for v in y.data_mut() {
                *v = mul * *v + add;
            }
            y
        };
        self.tape.push(Op::Affine { mul }, vec![self.id], out)
    }

    /// Numerically-stable softmax cross-entropy of the whole tensor read
    /// as one logit vector.
    pub fn softmax_ce(self, target: usize) -> Result<Var<'t, S>> {
        let n = self.value().len();
        if target >= n {
            return Err(Error::index(format!(
                "softmax_ce target {} out of range for {} logits",
                target, n
            )));
        }
        let group = CeGroup {
            idxs: (0..n as u32).collect(),
            target: target as u32,
        };
        self.softmax_ce_groups(vec![group])
    }

    /// Summed softmax cross-entropy over many logit groups drawn from one
    /// tensor. The multibox loss uses this with one group per selected
    /// anchor.
    pub fn softmax_ce_groups(self, groups: Vec<CeGroup>) -> Result<Var<'t, S>> {
        let (loss, probs) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let n = x.len() as u32;
            let mut probs = Vec::new();
            let mut loss = S::zero();
            for g in &groups {
                if g.idxs.is_empty() {
                    return Err(Error::contract("empty softmax_ce group".to_string()));
                }
                if g.target as usize >= g.idxs.len() {
                    return Err(Error::index(format!(
                        "softmax_ce target {} out of range for {} logits",
                        g.target,
                        g.idxs.len()
                    )));
                }
                if let Some(&bad) = g.idxs.iter().find(|&&i| i >= n) {
                    return Err(Error::index(format!(
                        "softmax_ce logit index {} out of range ({} elements)",
                        bad, n
                    )));
                }
                loss += softmax_ce_group(x.data(), g, &mut probs);
            }
            (loss, probs)
        };
        Ok(self.tape.push(
            Op::SoftmaxCe { groups, probs },
            vec![self.id],
            Tensor::scalar(loss),
        ))
    }

    /// Summed smooth-L1 (Huber at delta 1) between two equal-shape
    /// tensors: `0.5*d^2` for `|d| < 1`, else `|d| - 0.5`.
    pub fn smooth_l1(self, target: Var<'t, S>) -> Result<Var<'t, S>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let p = &nodes[self.id].value;
            let t = &nodes[target.id].value;
            if !p.same_shape(t) {
                return Err(Error::dim(format!(
                    "smooth_l1 shapes differ: {:?} vs {:?}",
                    p.shape(),
                    t.shape()
                )));
            }
            let mut loss = S::zero();
            for i in 0..p.len() {
                loss += smooth_l1_value(p.data()[i] - t.data()[i]);
            }
            Tensor::scalar(loss)
        };
        Ok(self.tape.push(Op::SmoothL1Pair, vec![self.id, target.id], out))
    }

    /// Summed smooth-L1 over selected flat positions with constant
    /// targets; gradient flows only into the listed positions.
    pub fn smooth_l1_at(self, entries: Vec<(u32, S)>) -> Result<Var<'t, S>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let p = &nodes[self.id].value;
            let n = p.len() as u32;
            if let Some(&(bad, _)) = entries.iter().find(|(i, _)| *i >= n) {
                return Err(Error::index(format!(
                    "smooth_l1 index {} out of range ({} elements)",
                    bad, n
                )));
            }
            let mut loss = S::zero();
            for &(idx, t) in &entries {
                loss += smooth_l1_value(p.data()[idx as usize] - t);
            }
            Tensor::scalar(loss)
        };
        Ok(self.tape.push(Op::SmoothL1At { entries }, vec![self.id], out))
    }
}

/// Concatenate along the channel axis; all inputs share B, H, W.
pub fn concat_channels<'t, S: Scalar>(inputs: &[Var<'t, S>]) -> Result<Var<'t, S>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::contract("concat of zero tensors".to_string()))?;
    let tape = first.tape;
    let out = {
        let nodes = tape.nodes.borrow();
        let (b, _, h, w) = nodes[first.id].value.dims4()?;
        let mut total_c = 0;
        for v in inputs {
            let (vb, vc, vh, vw) = nodes[v.id].value.dims4()?;
            if (vb, vh, vw) != (b, h, w) {
                return Err(Error::dim("concat inputs disagree on B/H/W".to_string()));
            }
            total_c += vc;
        }
        let plane = h * w;
        let mut out = Tensor::zeros(&[b, total_c, h, w]);
        let od = out.data_mut();
        for bi in 0..b {
            let mut c_off = 0;
            for v in inputs {
                let vc = nodes[v.id].value.shape()[1];
                let src = &nodes[v.id].value.data()[bi * vc * plane..(bi + 1) * vc * plane];
                let dst = ((bi * total_c) + c_off) * plane;
                od[dst..dst + vc * plane].copy_from_slice(src);
                c_off += vc;
            }
        }
        out
    };
    Ok(tape.push(Op::ConcatChannels, inputs.iter().map(|v| v.id).collect(), out))
}

fn smooth_l1_value<S: Scalar>(d: S) -> S {
    let half = S::fromf(0.5);
    if d.abs() < S::one() {
        half * d * d
    } else {
        d.abs() - half
    }
}

fn softmax_ce_group<S: Scalar>(data: &[S], g: &CeGroup, probs_out: &mut Vec<S>) -> S {
    let mut m = S::neg_infinity();
    for &i in &g.idxs {
        if data[i as usize] > m {
            m = data[i as usize];
        }
    }
    let mut z = S::zero();
    let base = probs_out.len();
    for &i in &g.idxs {
        let e = (data[i as usize] - m).exp();
        probs_out.push(e);
        z += e;
    }
    for p in &mut probs_out[base..] {
        *p = *p / z;
    }
    let t = g.idxs[g.target as usize] as usize;
    z.ln() - (data[t] - m)
}

/// Valid indices `i` in `[0, count)` with `i*stride + tap - pad` inside
/// `[0, limit)`; shared by the gather and scatter convolution loops.
fn tap_range(count: usize, stride: usize, tap: usize, pad: usize, limit: usize) -> std::ops::Range<usize> {
    let lo = if pad > tap {
        (pad - tap).div_ceil(stride)
    } else {
        0
    };
    let hi = match (limit + pad).checked_sub(tap + 1) {
        Some(m) => ((m / stride) + 1).min(count),
        None => lo,
    };
    lo..hi.max(lo)
}

/// Forward cross-correlation. Kernel layout `O x C x Kh x Kw`.
fn conv_core<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let (b, c, h, wd) = x.dims4()?;
    let (o, wc, kh, kw) = w.dims4()?;
    if wc != c {
        return Err(Error::dim(format!(
            "conv kernel expects {} input channels, tensor has {}",
            wc, c
        )));
    }
    if stride == 0 {
        return Err(Error::contract("conv stride must be >= 1".to_string()));
    }
    if kh > h + 2 * pad || kw > wd + 2 * pad {
        return Err(Error::dim(format!(
            "conv kernel {}x{} exceeds padded input {}x{}",
            kh,
            kw,
            h + 2 * pad,
            wd + 2 * pad
        )));
    }
    if let Some(bt) = bias {
        if bt.rank() != 1 || bt.len() != o {
            return Err(Error::dim(format!(
                "conv bias must have length {}, got {:?}",
                o,
                bt.shape()
            )));
        }
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[b, o, oh, ow]);
    let xd = x.data();
    let wdat = w.data();
    let od = out.data_mut();
    for bi in 0..b {
        for oc in 0..o {
            let oplane = ((bi * o) + oc) * oh * ow;
            if let Some(bt) = bias {
                let bv = bt.data()[oc];
                od[oplane..oplane + oh * ow].iter_mut().for_each(|v| *v = bv);
            }
            for ic in 0..c {
                let xplane = ((bi * c) + ic) * h * wd;
                let wbase = ((oc * c) + ic) * kh * kw;
                for u in 0..kh {
                    let irange = tap_range(oh, stride, u, pad, h);
                    for v in 0..kw {
                        let wv = wdat[wbase + u * kw + v];
                        if wv == S::zero() {
                            continue;
                        }
                        let jrange = tap_range(ow, stride, v, pad, wd);
                        for i in irange.clone() {
                            let xi = i * stride + u - pad;
                            let xrow = xplane + xi * wd;
                            let orow = oplane + i * ow;
                            for j in jrange.clone() {
                                let xj = j * stride + v - pad;
                                od[orow + j] += wv * xd[xrow + xj];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Forward transposed convolution with an explicit output size. Kernel
/// layout `C x O x Kh x Kw` (first axis is the input channel). Also the
/// input-gradient of [`conv_core`] when handed the conv's own kernel.
fn deconv_core<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Result<Tensor<S>> {
    let (b, c, h, wd) = x.dims4()?;
    let (wc, o, kh, kw) = w.dims4()?;
    if wc != c {
        return Err(Error::dim(format!(
            "deconv kernel expects {} input channels, tensor has {}",
            wc, c
        )));
    }
    if stride == 0 {
        return Err(Error::contract("deconv stride must be >= 1".to_string()));
    }
    let mut out = Tensor::zeros(&[b, o, oh, ow]);
    let xd = x.data();
    let wdat = w.data();
    let od = out.data_mut();
    for bi in 0..b {
        for ic in 0..c {
            let xplane = ((bi * c) + ic) * h * wd;
            for oc in 0..o {
                let oplane = ((bi * o) + oc) * oh * ow;
                let wbase = ((ic * o) + oc) * kh * kw;
                for u in 0..kh {
                    let irange = tap_range(h, stride, u, pad, oh);
                    for v in 0..kw {
                        let wv = wdat[wbase + u * kw + v];
                        if wv == S::zero() {
                            continue;
                        }
                        let jrange = tap_range(wd, stride, v, pad, ow);
                        for i in irange.clone() {
                            let oi = i * stride + u - pad;
                            let xrow = xplane + i * wd;
                            let orow = oplane + oi * ow;
                            for j in jrange.clone() {
                                let oj = j * stride + v - pad;
                                od[orow + oj] += wv * xd[xrow + j];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Kernel gradient of [`conv_core`]: `gw[o,c,u,v] = sum_{b,i,j}
/// gy[b,o,i,j] * x[b,c,i*s+u-p, j*s+v-p]`. With the argument roles
/// swapped it is also the kernel gradient of [`deconv_core`].
fn conv_grad_w<S: Scalar>(
    x: &Tensor<S>,
    gy: &Tensor<S>,
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
) -> Result<Tensor<S>> {
    let (b, c, h, wd) = x.dims4()?;
    let (gb, o, oh, ow) = gy.dims4()?;
    debug_assert_eq!(b, gb);
    let mut gw = Tensor::zeros(&[o, c, kh, kw]);
    let xd = x.data();
    let gd = gy.data();
    let gwd = gw.data_mut();
    for bi in 0..b {
        for oc in 0..o {
            let gplane = ((bi * o) + oc) * oh * ow;
            for ic in 0..c {
                let xplane = ((bi * c) + ic) * h * wd;
                let wbase = ((oc * c) + ic) * kh * kw;
                for u in 0..kh {
                    let irange = tap_range(oh, stride, u, pad, h);
                    for v in 0..kw {
                        let jrange = tap_range(ow, stride, v, pad, wd);
                        let mut s = S::zero();
                        for i in irange.clone() {
                            let xi = i * stride + u - pad;
                            let xrow = xplane + xi * wd;
                            let grow = gplane + i * ow;
                            for j in jrange.clone() {
                                let xj = j * stride + v - pad;
                                s += gd[grow + j] * xd[xrow + xj];
                            }
                        }
                        gwd[wbase + u * kw + v] += s;
                    }
                }
            }
        }
    }
    Ok(gw)
}

fn conv_grad_b<S: Scalar>(gy: &Tensor<S>) -> Tensor<S> {
    let (b, o, oh, ow) = gy.dims4().expect("conv grad rank");
    let mut gb = Tensor::zeros(&[o]);
    let gd = gy.data();
    for bi in 0..b {
        for oc in 0..o {
            let plane = ((bi * o) + oc) * oh * ow;
            let mut s = S::zero();
            for v in &gd[plane..plane + oh * ow] {
                s += *v;
            }
            gb.data_mut()[oc] += s;
        }
    }
    gb
}

fn maxpool_core<S: Scalar>(
    x: &Tensor<S>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<S>, Vec<u32>)> {
    let (b, c, h, w) = x.dims4()?;
    if window == 0 || stride == 0 {
        return Err(Error::contract("pool window and stride must be >= 1".to_string()));
    }
    if window > h || window > w {
        return Err(Error::dim(format!(
            "pool window {} exceeds input {}x{}",
            window, h, w
        )));
    }
    debug_assert!(x.len() <= u32::MAX as usize);
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let mut argmax = vec![0u32; out.len()];
    let xd = x.data();
    let od = out.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            let xplane = ((bi * c) + ci) * h * w;
            let oplane = ((bi * c) + ci) * oh * ow;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = S::neg_infinity();
                    let mut best_idx = 0usize;
                    // strict '>' keeps the first maximum in scan order
                    for u in 0..window {
                        let row = xplane + (i * stride + u) * w + j * stride;
                        for v in 0..window {
                            if xd[row + v] > best {
                                best = xd[row + v];
                                best_idx = row + v;
                            }
                        }
                    }
                    od[oplane + i * ow + j] = best;
                    argmax[oplane + i * ow + j] = best_idx as u32;
                }
            }
        }
    }
    Ok((out, argmax))
}

fn l2norm_forward<S: Scalar>(x: &Tensor<S>, gamma: &Tensor<S>, eps: S) -> (Tensor<S>, Vec<S>) {
    let (b, c, h, w) = x.dims4().expect("l2norm rank");
    let plane = h * w;
    let mut out = Tensor::zeros(x.shape());
    let mut inv_norms = vec![S::zero(); b * plane];
    let xd = x.data();
    let gm = gamma.data();
    let od = out.data_mut();
    for bi in 0..b {
        for pix in 0..plane {
            let mut s = S::zero();
            for ci in 0..c {
                let v = xd[((bi * c) + ci) * plane + pix];
                s += v * v;
            }
            let r = (s + eps).sqrt().recip();
            inv_norms[bi * plane + pix] = r;
            for ci in 0..c {
                let idx = ((bi * c) + ci) * plane + pix;
                od[idx] = gm[ci] * xd[idx] * r;
            }
        }
    }
    (out, inv_norms)
}

fn l2norm_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    inv_norms: &[S],
    g: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    let (b, c, h, w) = x.dims4().expect("l2norm rank");
    let plane = h * w;
    let mut gx = Tensor::zeros(x.shape());
    let mut ggamma = Tensor::zeros(gamma.shape());
    let xd = x.data();
    let gm = gamma.data();
    let gd = g.data();
    let gxd = gx.data_mut();
    let ggd = ggamma.data_mut();
    for bi in 0..b {
        for pix in 0..plane {
            let r = inv_norms[bi * plane + pix];
            let r3 = r * r * r;
            let mut common = S::zero();
            for ci in 0..c {
                let idx = ((bi * c) + ci) * plane + pix;
                common += gd[idx] * gm[ci] * xd[idx];
            }
            for ci in 0..c {
                let idx = ((bi * c) + ci) * plane + pix;
                gxd[idx] = gm[ci] * r * gd[idx] - xd[idx] * r3 * common;
                ggd[ci] += gd[idx] * xd[idx] * r;
            }
        }
    }
    (gx, ggamma)
}
