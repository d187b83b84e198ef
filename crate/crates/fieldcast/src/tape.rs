//! Reverse-mode differentiation over small dense tensors.
//!
//! A [`Tape`] records a forward computation as a flat list of nodes; calling
//! [`Tape::backward`] on a scalar node walks the list in reverse and
//! accumulates gradients for every node that (transitively) depends on a
//! gradient-requiring leaf. The op set is exactly what the forecasting
//! pipeline needs: elementwise arithmetic, ReLU, channel concatenation,
//! strided convolution, nearest-neighbor upsampling, advection (including
//! gradients with respect to the flow), spatial derivative stencils, and the
//! reductions appearing in the training objective.
//!
//! Tensors are rank-1 (`[n]`, scalars and biases), rank-3 (`[c, h, w]`
//! feature maps), or rank-4 (`[co, ci, k, k]` convolution weights). All
//! arithmetic is f64 with a fixed accumulation order, so a fixed graph
//! evaluates bit-identically across runs.

use std::rc::Rc;

use crate::diff;
use crate::field::{ScalarField, VectorField};
use crate::warp::{advect_backward_raw, advect_raw, KernelStencil};

/// A dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_data(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length must match its shape"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// `[1, h, w]` tensor holding a scalar field.
    pub fn from_field(field: &ScalarField) -> Self {
        Tensor::from_data(
            &[1, field.height(), field.width()],
            field.data().to_vec(),
        )
    }

    /// `[2, h, w]` tensor holding a displacement field (`u` then `v`).
    pub fn from_flow(flow: &VectorField) -> Self {
        let mut data = Vec::with_capacity(2 * flow.height() * flow.width());
        data.extend_from_slice(flow.u_data());
        data.extend_from_slice(flow.v_data());
        Tensor::from_data(&[2, flow.height(), flow.width()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected a [c, h, w] tensor");
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn to_field(&self) -> ScalarField {
        let (c, h, w) = self.chw();
        assert_eq!(c, 1, "expected a single-channel tensor");
        ScalarField::from_vec(h, w, self.data.clone()).expect("shape matches data")
    }

    pub fn to_flow(&self) -> VectorField {
        let (c, h, w) = self.chw();
        assert_eq!(c, 2, "expected a two-channel tensor");
        let (u, v) = self.data.split_at(h * w);
        VectorField::from_components(h, w, u.to_vec(), v.to_vec()).expect("shape matches data")
    }
}

/// Handle to a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    /// a + b
    Add(NodeId, NodeId),
    /// a - b
    Sub(NodeId, NodeId),
    /// c * a
    Scale(NodeId, f64),
    /// a + c * b
    AddScaled(NodeId, NodeId, f64),
    Relu(NodeId),
    /// Channel concatenation of rank-3 tensors.
    ConcatC(Vec<NodeId>),
    /// 2D convolution, kernel k x k, same-padding (k-1)/2, stride 1 or 2.
    Conv {
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
    },
    /// Nearest-neighbor 2x upsampling.
    Upsample2(NodeId),
    /// Stencil-weighted backward warp of `src` along `flow`.
    Advect {
        src: NodeId,
        flow: NodeId,
        stencil: Rc<KernelStencil>,
        pad: f64,
    },
    /// Per-channel spatial derivatives: [c,h,w] -> [2c,h,w] (ddx, ddy pairs).
    SpatialGrad(NodeId),
    /// du/dx + dv/dy of a [2,h,w] tensor -> [1,h,w].
    Divergence(NodeId),
    /// sum(x^2) / (h*w) -> scalar.
    SpatialMeanSq(NodeId),
    /// sum(weight * x^2) / (h*w) -> scalar.
    WeightedMeanSq { x: NodeId, weight: Rc<Vec<f64>> },
    /// sum(weight * x) -> scalar.
    Dot { x: NodeId, weight: Rc<Vec<f64>> },
    /// sum(coeff_i * scalar_i) -> scalar.
    WeightedSum(Vec<(NodeId, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `id`, if `id` required one.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a node known to require one.
    pub fn wrt(&self, id: NodeId) -> &Tensor {
        self.grads[id.0]
            .as_ref()
            .expect("node does not require gradients")
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let t = self.value(id);
        assert_eq!(t.numel(), 1, "expected a scalar node");
        t.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Inserts an input; `requires_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Inserts a constant input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add: shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_data(self.value(a).shape(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub: shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::from_data(self.value(a).shape(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), needs)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.value(a).data().iter().map(|x| c * x).collect();
        let value = Tensor::from_data(self.value(a).shape(), data);
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, c), needs)
    }

    /// `a + c * b`.
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: f64) -> NodeId {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "add_scaled: shape mismatch"
        );
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + c * y)
            .collect();
        let value = Tensor::from_data(self.value(a).shape(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::AddScaled(a, b, c), needs)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let value = Tensor::from_data(self.value(a).shape(), data);
        let needs = self.needs(a);
        self.push(value, Op::Relu(a), needs)
    }

    pub fn concat_c(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_c: no inputs");
        let (_, h, w) = self.value(parts[0]).chw();
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (c, ph, pw) = self.value(p).chw();
            assert_eq!((ph, pw), (h, w), "concat_c: spatial shape mismatch");
            channels += c;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::from_data(&[channels, h, w], data);
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatC(parts.to_vec()), needs)
    }

    /// Same-padded convolution; `weight` is `[co, ci, k, k]`, `bias` `[co]`,
    /// stride 1 or 2.
    pub fn conv(&mut self, x: NodeId, weight: NodeId, bias: NodeId, stride: usize) -> NodeId {
        assert!(stride == 1 || stride == 2, "conv: stride must be 1 or 2");
        let (ci, h, w) = self.value(x).chw();
        let ws = self.value(weight).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv: weight must be [co, ci, k, k]");
        let (co, wci, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(ws[3], k, "conv: kernel must be square");
        assert_eq!(wci, ci, "conv: weight input channels must match x");
        assert_eq!(self.value(bias).shape(), &[co], "conv: bias must be [co]");
        let pad = (k - 1) / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; co * ho * wo];
        {
            let xv = self.value(x).data();
            let wv = self.value(weight).data();
            let bv = self.value(bias).data();
            for oc in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bv[oc];
                        for ic in 0..ci {
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += wv[((oc * ci + ic) * k + ky) * k + kx]
                                        * xv[(ic * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        out[(oc * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        let value = Tensor::from_data(&[co, ho, wo], out);
        let needs = self.needs(x) || self.needs(weight) || self.needs(bias);
        self.push(
            value,
            Op::Conv {
                x,
                weight,
                bias,
                stride,
            },
            needs,
        )
    }

    pub fn upsample2(&mut self, a: NodeId) -> NodeId {
        let (c, h, w) = self.value(a).chw();
        let mut out = vec![0.0; c * 4 * h * w];
        {
            let av = self.value(a).data();
            for ch in 0..c {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        out[(ch * 2 * h + y) * 2 * w + x] = av[(ch * h + y / 2) * w + x / 2];
                    }
                }
            }
        }
        let value = Tensor::from_data(&[c, 2 * h, 2 * w], out);
        let needs = self.needs(a);
        self.push(value, Op::Upsample2(a), needs)
    }

    /// Backward-warps every channel of `src` along the two-channel `flow`
    /// under the given stencil; differentiates into both `src` and `flow`.
    pub fn advect(
        &mut self,
        src: NodeId,
        flow: NodeId,
        stencil: Rc<KernelStencil>,
        pad: f64,
    ) -> NodeId {
        let (c, h, w) = self.value(src).chw();
        let (fc, fh, fw) = self.value(flow).chw();
        assert_eq!(fc, 2, "advect: flow must have two channels");
        assert_eq!((fh, fw), (h, w), "advect: flow shape mismatch");
        let mut out = vec![0.0; c * h * w];
        {
            let sv = self.value(src).data();
            let fv = self.value(flow).data();
            let (u, v) = fv.split_at(h * w);
            for ch in 0..c {
                advect_raw(
                    &sv[ch * h * w..(ch + 1) * h * w],
                    h,
                    w,
                    u,
                    v,
                    &stencil,
                    pad,
                    &mut out[ch * h * w..(ch + 1) * h * w],
                );
            }
        }
        let value = Tensor::from_data(&[c, h, w], out);
        let needs = self.needs(src) || self.needs(flow);
        self.push(
            value,
            Op::Advect {
                src,
                flow,
                stencil,
                pad,
            },
            needs,
        )
    }

    /// Per-channel spatial derivatives: channel `c` of the input produces
    /// output channels `2c` (d/dx) and `2c + 1` (d/dy).
    pub fn spatial_grad(&mut self, a: NodeId) -> NodeId {
        let (c, h, w) = self.value(a).chw();
        let mut out = vec![0.0; 2 * c * h * w];
        {
            let av = self.value(a).data();
            for ch in 0..c {
                let src = &av[ch * h * w..(ch + 1) * h * w];
                diff::ddx(src, h, w, &mut out[2 * ch * h * w..(2 * ch + 1) * h * w]);
                diff::ddy(src, h, w, &mut out[(2 * ch + 1) * h * w..(2 * ch + 2) * h * w]);
            }
        }
        let value = Tensor::from_data(&[2 * c, h, w], out);
        let needs = self.needs(a);
        self.push(value, Op::SpatialGrad(a), needs)
    }

    /// `du/dx + dv/dy` of a two-channel tensor.
    pub fn divergence(&mut self, a: NodeId) -> NodeId {
        let (c, h, w) = self.value(a).chw();
        assert_eq!(c, 2, "divergence: input must have two channels");
        let mut out = vec![0.0; h * w];
        let mut tmp = vec![0.0; h * w];
        {
            let av = self.value(a).data();
            let (u, v) = av.split_at(h * w);
            diff::ddx(u, h, w, &mut out);
            diff::ddy(v, h, w, &mut tmp);
            for (o, t) in out.iter_mut().zip(&tmp) {
                *o += t;
            }
        }
        let value = Tensor::from_data(&[1, h, w], out);
        let needs = self.needs(a);
        self.push(value, Op::Divergence(a), needs)
    }

    /// `sum(x^2) / (h * w)`; sums over channels, normalizes by pixels.
    pub fn spatial_mean_sq(&mut self, a: NodeId) -> NodeId {
        let (_, h, w) = self.value(a).chw();
        let n = (h * w) as f64;
        let s: f64 = self.value(a).data().iter().map(|x| x * x).sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s / n), Op::SpatialMeanSq(a), needs)
    }

    /// `sum(weight * x^2) / (h * w)` with a constant `weight`.
    pub fn weighted_mean_sq(&mut self, x: NodeId, weight: Rc<Vec<f64>>) -> NodeId {
        let (_, h, w) = self.value(x).chw();
        assert_eq!(
            weight.len(),
            self.value(x).numel(),
            "weighted_mean_sq: weight length mismatch"
        );
        let n = (h * w) as f64;
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weight.iter())
            .map(|(v, w)| w * v * v)
            .sum();
        let needs = self.needs(x);
        self.push(
            Tensor::scalar(s / n),
            Op::WeightedMeanSq { x, weight },
            needs,
        )
    }

    /// Inner product `sum(weight * x)` with a constant `weight`.
    pub fn dot(&mut self, x: NodeId, weight: Rc<Vec<f64>>) -> NodeId {
        assert_eq!(
            weight.len(),
            self.value(x).numel(),
            "dot: weight length mismatch"
        );
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weight.iter())
            .map(|(v, w)| w * v)
            .sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Dot { x, weight }, needs)
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        assert!(!terms.is_empty(), "weighted_sum: no terms");
        let mut acc = 0.0;
        let mut needs = false;
        for &(id, c) in terms {
            assert_eq!(self.value(id).numel(), 1, "weighted_sum: non-scalar term");
            acc += c * self.value(id).data()[0];
            needs |= self.needs(id);
        }
        self.push(Tensor::scalar(acc), Op::WeightedSum(terms.to_vec()), needs)
    }

    /// Reverse pass from a scalar `root`; returns gradients for every node
    /// on a gradient-requiring path.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.value(root).numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = self.nodes.iter().map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut Vec<Option<Tensor>>, id: NodeId, update: impl FnOnce(&mut Tensor)) {
        if !self.needs(id) {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(id).shape()));
        }
        update(slot.as_mut().unwrap());
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |t| {
                    for (o, gi) in t.data_mut().iter_mut().zip(g.data()) {
                        *o += gi;
                    }
                });
                self.accumulate(grads, *b, |t| {
                    for (o, gi) in t.data_mut().iter_mut().zip(g.data()) {
                        *o += gi;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |t| {
                    for (o, gi) in t.data_mut().iter_mut().zip(g.data()) {
                        *o += gi;
                    }
                });
                self.accumulate(grads, *b, |t| {
                    for (o, gi) in t.data_mut().iter_mut().zip(g.data()) {
                        *o -= gi;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, |t| {
                    for (o, gi) in t.data_mut().iter_mut().zip(g.data()) {
                        *o += c * gi;
                    }
                });
            }
            Op::AddScaled(a, b, c) => {
                let c = *c;
                self.accumulate(grads, *a, |t| {
                    for (o, gi) in t.data_mut().iter_mut().zip(g.data()) {
                        *o += gi;
                    }
                });
                self.accumulate(grads, *b, |t| {
                    for (o, gi) in t.data_mut().iter_mut().zip(g.data()) {
                        *o += c * gi;
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |t| {
                    for (k, (o, gi)) in t.data_mut().iter_mut().zip(g.data()).enumerate() {
                        if av[k] > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::ConcatC(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let gslice = &g.data()[offset..offset + n];
                    self.accumulate(grads, p, |t| {
                        for (o, gi) in t.data_mut().iter_mut().zip(gslice) {
                            *o += gi;
                        }
                    });
                    offset += n;
                }
            }
            Op::Conv {
                x,
                weight,
                bias,
                stride,
            } => {
                let (ci, h, w) = self.value(*x).chw();
                let ws = self.value(*weight).shape();
                let (co, k) = (ws[0], ws[2]);
                let pad = (k - 1) / 2;
                let (_, ho, wo) = self.nodes[i].value.chw();
                let xv = self.value(*x).data();
                let wv = self.value(*weight).data();
                let gv = g.data();
                let stride = *stride;

                if self.needs(*bias) {
                    self.accumulate(grads, *bias, |t| {
                        let tb = t.data_mut();
                        for oc in 0..co {
                            let mut s = 0.0;
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    s += gv[(oc * ho + oy) * wo + ox];
                                }
                            }
                            tb[oc] += s;
                        }
                    });
                }
                if self.needs(*weight) {
                    self.accumulate(grads, *weight, |t| {
                        let tw = t.data_mut();
                        for oc in 0..co {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let go = gv[(oc * ho + oy) * wo + ox];
                                    if go == 0.0 {
                                        continue;
                                    }
                                    for ic in 0..ci {
                                        for ky in 0..k {
                                            let iy = (oy * stride + ky) as isize - pad as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for kx in 0..k {
                                                let ix =
                                                    (ox * stride + kx) as isize - pad as isize;
                                                if ix < 0 || ix >= w as isize {
                                                    continue;
                                                }
                                                tw[((oc * ci + ic) * k + ky) * k + kx] += go
                                                    * xv[(ic * h + iy as usize) * w
                                                        + ix as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                if self.needs(*x) {
                    self.accumulate(grads, *x, |t| {
                        let tx = t.data_mut();
                        for oc in 0..co {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let go = gv[(oc * ho + oy) * wo + ox];
                                    if go == 0.0 {
                                        continue;
                                    }
                                    for ic in 0..ci {
                                        for ky in 0..k {
                                            let iy = (oy * stride + ky) as isize - pad as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for kx in 0..k {
                                                let ix =
                                                    (ox * stride + kx) as isize - pad as isize;
                                                if ix < 0 || ix >= w as isize {
                                                    continue;
                                                }
                                                tx[(ic * h + iy as usize) * w + ix as usize] +=
                                                    go * wv[((oc * ci + ic) * k + ky) * k + kx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::Upsample2(a) => {
                let (c, h, w) = self.value(*a).chw();
                self.accumulate(grads, *a, |t| {
                    let ta = t.data_mut();
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                ta[(ch * h + y / 2) * w + x / 2] +=
                                    g.data()[(ch * 2 * h + y) * 2 * w + x];
                            }
                        }
                    }
                });
            }
            Op::Advect {
                src,
                flow,
                stencil,
                pad,
            } => {
                let (c, h, w) = self.value(*src).chw();
                let sv = self.value(*src).data();
                let fv = self.value(*flow).data();
                let (u, v) = fv.split_at(h * w);
                let need_src = self.needs(*src);
                let need_flow = self.needs(*flow);
                let mut g_src = if need_src {
                    Some(vec![0.0; c * h * w])
                } else {
                    None
                };
                let mut g_u = if need_flow {
                    Some(vec![0.0; h * w])
                } else {
                    None
                };
                let mut g_v = if need_flow {
                    Some(vec![0.0; h * w])
                } else {
                    None
                };
                for ch in 0..c {
                    advect_backward_raw(
                        &sv[ch * h * w..(ch + 1) * h * w],
                        h,
                        w,
                        u,
                        v,
                        stencil,
                        *pad,
                        &g.data()[ch * h * w..(ch + 1) * h * w],
                        g_src
                            .as_mut()
                            .map(|gs| &mut gs[ch * h * w..(ch + 1) * h * w]),
                        g_u.as_deref_mut(),
                        g_v.as_deref_mut(),
                    );
                }
                if let Some(gs) = g_src {
                    self.accumulate(grads, *src, |t| {
                        for (o, gi) in t.data_mut().iter_mut().zip(&gs) {
                            *o += gi;
                        }
                    });
                }
                if let (Some(gu), Some(gv)) = (g_u, g_v) {
                    self.accumulate(grads, *flow, |t| {
                        let tf = t.data_mut();
                        for (k, gi) in gu.iter().enumerate() {
                            tf[k] += gi;
                        }
                        for (k, gi) in gv.iter().enumerate() {
                            tf[h * w + k] += gi;
                        }
                    });
                }
            }
            Op::SpatialGrad(a) => {
                let (c, h, w) = self.value(*a).chw();
                self.accumulate(grads, *a, |t| {
                    let ta = t.data_mut();
                    for ch in 0..c {
                        diff::ddx_adjoint(
                            &g.data()[2 * ch * h * w..(2 * ch + 1) * h * w],
                            h,
                            w,
                            &mut ta[ch * h * w..(ch + 1) * h * w],
                        );
                        diff::ddy_adjoint(
                            &g.data()[(2 * ch + 1) * h * w..(2 * ch + 2) * h * w],
                            h,
                            w,
                            &mut ta[ch * h * w..(ch + 1) * h * w],
                        );
                    }
                });
            }
            Op::Divergence(a) => {
                let (_, h, w) = self.value(*a).chw();
                self.accumulate(grads, *a, |t| {
                    let ta = t.data_mut();
                    let (tu, tv) = ta.split_at_mut(h * w);
                    diff::ddx_adjoint(g.data(), h, w, tu);
                    diff::ddy_adjoint(g.data(), h, w, tv);
                });
            }
            Op::SpatialMeanSq(a) => {
                let (_, h, w) = self.value(*a).chw();
                let n = (h * w) as f64;
                let av = self.value(*a).data();
                let go = g.data()[0];
                self.accumulate(grads, *a, |t| {
                    for (k, o) in t.data_mut().iter_mut().enumerate() {
                        *o += go * 2.0 * av[k] / n;
                    }
                });
            }
            Op::WeightedMeanSq { x, weight } => {
                let (_, h, w) = self.value(*x).chw();
                let n = (h * w) as f64;
                let xv = self.value(*x).data();
                let go = g.data()[0];
                let weight = Rc::clone(weight);
                self.accumulate(grads, *x, |t| {
                    for (k, o) in t.data_mut().iter_mut().enumerate() {
                        *o += go * 2.0 * weight[k] * xv[k] / n;
                    }
                });
            }
            Op::Dot { x, weight } => {
                let go = g.data()[0];
                let weight = Rc::clone(weight);
                self.accumulate(grads, *x, |t| {
                    for (k, o) in t.data_mut().iter_mut().enumerate() {
                        *o += go * weight[k];
                    }
                });
            }
            Op::WeightedSum(terms) => {
                let go = g.data()[0];
                for &(id, c) in terms {
                    self.accumulate(grads, id, |t| {
                        t.data_mut()[0] += go * c;
                    });
                }
            }
        }
    }
}
