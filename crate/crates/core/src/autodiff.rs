//! Reverse-mode differentiation over a recorded op tape.
//!
//! A [`Graph`] records every primitive as it executes; [`Graph::backward`]
//! replays the tape in exact reverse execution order and accumulates
//! vector-Jacobian products additively into each leaf that requires
//! gradients. The op set is intentionally small: what is needed to push a
//! scalar feature-space loss back to image pixels.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

/// An op whose forward and VJP are supplied by the caller. Used by scoring
/// backends to register their loss kernels without widening the op enum.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// One gradient per input, or `None` where no gradient flows.
    fn vjp(&self, grad_out: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Conv2d { input: VarId, kernel: VarId, stride: usize, pad: usize },
    AvgPool { input: VarId, k: usize, stride: usize },
    LeakyRelu { input: VarId, slope: f64 },
    UpsampleNearest { input: VarId, fh: usize, fw: usize },
    ConcatChannels { inputs: Vec<VarId> },
    Add { lhs: VarId, rhs: VarId },
    Sub { lhs: VarId, rhs: VarId },
    Mul { lhs: VarId, rhs: VarId },
    Scale { input: VarId, factor: f64 },
    MulConst { input: VarId, weights: Arc<Tensor> },
    Sum { input: VarId },
    Custom { inputs: Vec<VarId>, op: Arc<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Gradients for every node of a tape, indexed by [`VarId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the backward output w.r.t. the given node, if any flowed.
    pub fn wrt(&self, id: VarId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Like [`Gradients::wrt`] but substitutes zeros of the right shape.
    pub fn wrt_or_zeros(&self, id: VarId, shape: &[usize]) -> Tensor {
        match self.grads[id.0].as_ref() {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

/// Recorded forward tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> VarId {
        let id = VarId(self.nodes.len());
        self.nodes.push(Node { value, needs_grad, op });
        id
    }

    fn any_needs_grad(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Register an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// 2-D convolution of `[h,w,cin]` with a `[kh,kw,cin,cout]` kernel.
    /// Output spatial size is `floor((d + 2*pad - kd)/stride) + 1` per axis.
    pub fn conv2d(&mut self, input: VarId, kernel: VarId, stride: usize, pad: usize) -> Result<VarId> {
        let x = self.value(input);
        let k = self.value(kernel);
        if x.rank() != 3 {
            return Err(Error::shape("conv2d", format!("input rank {} != 3", x.rank())));
        }
        if k.rank() != 4 {
            return Err(Error::shape("conv2d", format!("kernel rank {} != 4", k.rank())));
        }
        let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (kh, kw, kcin, cout) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel dims {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input channel dim is {cin} but kernel expects {kcin}"),
            ));
        }
        if h + 2 * pad < kh {
            return Err(Error::shape(
                "conv2d",
                format!("kernel height {kh} exceeds padded input height {}", h + 2 * pad),
            ));
        }
        if w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel width {kw} exceeds padded input width {}", w + 2 * pad),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;

        let mut out = vec![0.0; oh * ow * cout];
        let xd = x.data();
        let kd = k.data();
        out.par_chunks_mut(ow * cout).enumerate().for_each(|(oi, row)| {
            for ki in 0..kh {
                let ii = (oi * stride + ki) as isize - pad as isize;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                let ii = ii as usize;
                for kj in 0..kw {
                    let kbase = (ki * kw + kj) * cin * cout;
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let jj = jj as usize;
                        let px = &xd[(ii * w + jj) * cin..(ii * w + jj) * cin + cin];
                        let acc = &mut row[oj * cout..oj * cout + cout];
                        let kblock = &kd[kbase..kbase + cin * cout];
                        for (&xv, krow) in px.iter().zip(kblock.chunks_exact(cout)) {
                            for (a, &kv) in acc.iter_mut().zip(krow) {
                                *a += xv * kv;
                            }
                        }
                    }
                }
            }
        });
        let needs = self.any_needs_grad(&[input, kernel]);
        let value = Tensor::from_op("conv2d", vec![oh, ow, cout], out);
        Ok(self.push(value, needs, Op::Conv2d { input, kernel, stride, pad }))
    }

    /// Mean over k×k windows with the given stride, no padding.
    pub fn avg_pool(&mut self, input: VarId, k: usize, stride: usize) -> Result<VarId> {
        let x = self.value(input);
        if x.rank() != 3 {
            return Err(Error::shape("avg_pool", format!("input rank {} != 3", x.rank())));
        }
        if k == 0 || stride == 0 {
            return Err(Error::invalid("avg_pool", "k and stride must be >= 1"));
        }
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if k > h || k > w {
            return Err(Error::shape(
                "avg_pool",
                format!("window {k} larger than input extent {h}x{w}"),
            ));
        }
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let inv = 1.0 / (k * k) as f64;
        let xd = x.data();
        let mut out = vec![0.0; oh * ow * c];
        for oi in 0..oh {
            for oj in 0..ow {
                let acc = &mut out[(oi * ow + oj) * c..(oi * ow + oj) * c + c];
                for di in 0..k {
                    for dj in 0..k {
                        let base = ((oi * stride + di) * w + oj * stride + dj) * c;
                        for ci in 0..c {
                            acc[ci] += xd[base + ci];
                        }
                    }
                }
                for v in acc.iter_mut() {
                    *v *= inv;
                }
            }
        }
        let needs = self.nodes[input.0].needs_grad;
        let value = Tensor::from_op("avg_pool", vec![oh, ow, c], out);
        Ok(self.push(value, needs, Op::AvgPool { input, k, stride }))
    }

    /// Elementwise `max(v, slope*v)`. Requires `0 < slope < 1`.
    pub fn leaky_relu(&mut self, input: VarId, slope: f64) -> Result<VarId> {
        if !(0.0 < slope && slope < 1.0) {
            return Err(Error::invalid("leaky_relu", format!("slope {slope} not in (0,1)")));
        }
        let value = self.value(input).map("leaky_relu", |v| if v >= 0.0 { v } else { slope * v });
        let needs = self.nodes[input.0].needs_grad;
        Ok(self.push(value, needs, Op::LeakyRelu { input, slope }))
    }

    /// Nearest-neighbor upsampling of `[h,w,c]` to `[th,tw,c]`; targets must
    /// be integer multiples of the input dims.
    pub fn upsample_nearest(&mut self, input: VarId, th: usize, tw: usize) -> Result<VarId> {
        let x = self.value(input);
        if x.rank() != 3 {
            return Err(Error::shape("upsample_nearest", format!("input rank {} != 3", x.rank())));
        }
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if th < h || th % h != 0 {
            return Err(Error::shape(
                "upsample_nearest",
                format!("target height {th} is not a multiple of input height {h}"),
            ));
        }
        if tw < w || tw % w != 0 {
            return Err(Error::shape(
                "upsample_nearest",
                format!("target width {tw} is not a multiple of input width {w}"),
            ));
        }
        let (fh, fw) = (th / h, tw / w);
        let xd = x.data();
        let mut out = vec![0.0; th * tw * c];
        for i in 0..th {
            let si = i / fh;
            for j in 0..tw {
                let sj = j / fw;
                out[(i * tw + j) * c..(i * tw + j) * c + c]
                    .copy_from_slice(&xd[(si * w + sj) * c..(si * w + sj) * c + c]);
            }
        }
        let needs = self.nodes[input.0].needs_grad;
        let value = Tensor::from_op("upsample_nearest", vec![th, tw, c], out);
        Ok(self.push(value, needs, Op::UpsampleNearest { input, fh, fw }))
    }

    /// Concatenate rank-3 tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[VarId]) -> Result<VarId> {
        if inputs.is_empty() {
            return Err(Error::invalid("concat_channels", "no inputs"));
        }
        let (h, w) = {
            let first = self.value(inputs[0]);
            if first.rank() != 3 {
                return Err(Error::shape("concat_channels", "inputs must be rank 3"));
            }
            (first.shape()[0], first.shape()[1])
        };
        let mut ctotal = 0;
        for &id in inputs {
            let t = self.value(id);
            if t.rank() != 3 || t.shape()[0] != h || t.shape()[1] != w {
                return Err(Error::shape(
                    "concat_channels",
                    format!("spatial dims {:?} differ from [{h}, {w}]", &t.shape()[..2]),
                ));
            }
            ctotal += t.shape()[2];
        }
        let mut out = vec![0.0; h * w * ctotal];
        let mut offset = 0;
        for &id in inputs {
            let t = self.value(id);
            let c = t.shape()[2];
            let td = t.data();
            for p in 0..h * w {
                out[p * ctotal + offset..p * ctotal + offset + c]
                    .copy_from_slice(&td[p * c..p * c + c]);
            }
            offset += c;
        }
        let needs = self.any_needs_grad(inputs);
        let value = Tensor::from_op("concat_channels", vec![h, w, ctotal], out);
        Ok(self.push(value, needs, Op::ConcatChannels { inputs: inputs.to_vec() }))
    }

    fn zip_ew(
        &mut self,
        name: &'static str,
        lhs: VarId,
        rhs: VarId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<VarId> {
        let a = self.value(lhs);
        let b = self.value(rhs);
        if a.shape() != b.shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_op(name, a.shape().to_vec(), data);
        let needs = self.any_needs_grad(&[lhs, rhs]);
        Ok(self.push(value, needs, op))
    }

    pub fn add(&mut self, lhs: VarId, rhs: VarId) -> Result<VarId> {
        self.zip_ew("add", lhs, rhs, |x, y| x + y, Op::Add { lhs, rhs })
    }

    pub fn sub(&mut self, lhs: VarId, rhs: VarId) -> Result<VarId> {
        self.zip_ew("sub", lhs, rhs, |x, y| x - y, Op::Sub { lhs, rhs })
    }

    /// Elementwise product.
    pub fn mul(&mut self, lhs: VarId, rhs: VarId) -> Result<VarId> {
        self.zip_ew("mul", lhs, rhs, |x, y| x * y, Op::Mul { lhs, rhs })
    }

    pub fn scale(&mut self, input: VarId, factor: f64) -> VarId {
        let value = self.value(input).map("scale", |v| v * factor);
        let needs = self.nodes[input.0].needs_grad;
        self.push(value, needs, Op::Scale { input, factor })
    }

    /// Elementwise product with a constant tensor (no gradient to the constant).
    pub fn mul_const(&mut self, input: VarId, weights: Arc<Tensor>) -> Result<VarId> {
        let x = self.value(input);
        if x.shape() != weights.shape() {
            return Err(Error::shape(
                "mul_const",
                format!("{:?} vs {:?}", x.shape(), weights.shape()),
            ));
        }
        let data = x.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).collect();
        let value = Tensor::from_op("mul_const", x.shape().to_vec(), data);
        let needs = self.nodes[input.0].needs_grad;
        Ok(self.push(value, needs, Op::MulConst { input, weights }))
    }

    /// Sum of all elements, producing a rank-0 scalar node.
    pub fn sum(&mut self, input: VarId) -> VarId {
        let total: f64 = self.value(input).data().iter().sum();
        let needs = self.nodes[input.0].needs_grad;
        self.push(Tensor::from_op("sum", vec![], vec![total]), needs, Op::Sum { input })
    }

    /// Run a caller-supplied op and record it for backward.
    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[VarId]) -> Result<VarId> {
        let tensors: Vec<&Tensor> = inputs.iter().map(|&id| self.value(id)).collect();
        let value = op.forward(&tensors)?;
        let needs = self.any_needs_grad(inputs);
        Ok(self.push(value, needs, Op::Custom { inputs: inputs.to_vec(), op }))
    }

    /// Reverse pass from a scalar output. Returns per-node gradients with
    /// fan-out contributions summed.
    pub fn backward(&self, output: VarId) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("output must be scalar, has shape {:?}", self.value(output).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::from_op(
            "backward-seed",
            self.value(output).shape().to_vec(),
            vec![1.0],
        ));

        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let gout = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_op(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: VarId, contrib: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                debug_assert_eq!(existing.shape(), contrib.shape());
                for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                    *e += c;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn backward_op(&self, idx: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, stride, pad } => {
                self.backward_conv2d(*input, *kernel, *stride, *pad, gout, grads);
            }
            Op::AvgPool { input, k, stride } => {
                let x = self.value(*input);
                let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (oh, ow) = (gout.shape()[0], gout.shape()[1]);
                let inv = 1.0 / ((k * k) as f64);
                let gd = gout.data();
                let mut gin = vec![0.0; h * w * c];
                let (k, stride) = (*k, *stride);
                gin.par_chunks_mut(w * c).enumerate().for_each(|(ii, row)| {
                    let oi_lo = ii.saturating_sub(k - 1).div_ceil(stride);
                    let oi_hi = (ii / stride).min(oh.saturating_sub(1));
                    for oi in oi_lo..=oi_hi {
                        if oi * stride + k <= ii || oi * stride > ii {
                            continue;
                        }
                        for jj in 0..w {
                            let oj_lo = jj.saturating_sub(k - 1).div_ceil(stride);
                            let oj_hi = (jj / stride).min(ow.saturating_sub(1));
                            for oj in oj_lo..=oj_hi {
                                if oj * stride + k <= jj || oj * stride > jj {
                                    continue;
                                }
                                let src = &gd[(oi * ow + oj) * c..(oi * ow + oj) * c + c];
                                let dst = &mut row[jj * c..jj * c + c];
                                for ci in 0..c {
                                    dst[ci] += src[ci] * inv;
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *input, Tensor::from_op("avg_pool-vjp", vec![h, w, c], gin));
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(*input);
                // Tie-break: gradient is `slope` at exactly zero.
                let data = x
                    .data()
                    .iter()
                    .zip(gout.data())
                    .map(|(&v, &g)| if v > 0.0 { g } else { g * slope })
                    .collect();
                self.accumulate(
                    grads,
                    *input,
                    Tensor::from_op("leaky_relu-vjp", x.shape().to_vec(), data),
                );
            }
            Op::UpsampleNearest { input, fh, fw } => {
                let x = self.value(*input);
                let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let tw = w * fw;
                let gd = gout.data();
                let mut gin = vec![0.0; h * w * c];
                for i in 0..h {
                    for j in 0..w {
                        let dst = &mut gin[(i * w + j) * c..(i * w + j) * c + c];
                        for bi in 0..*fh {
                            for bj in 0..*fw {
                                let src =
                                    ((i * fh + bi) * tw + (j * fw + bj)) * c;
                                for ci in 0..c {
                                    dst[ci] += gd[src + ci];
                                }
                            }
                        }
                    }
                }
                self.accumulate(
                    grads,
                    *input,
                    Tensor::from_op("upsample-vjp", vec![h, w, c], gin),
                );
            }
            Op::ConcatChannels { inputs } => {
                let (h, w, ctotal) =
                    (gout.shape()[0], gout.shape()[1], gout.shape()[2]);
                let gd = gout.data();
                let mut offset = 0;
                for &id in inputs {
                    let c = self.value(id).shape()[2];
                    if self.nodes[id.0].needs_grad {
                        let mut part = vec![0.0; h * w * c];
                        for p in 0..h * w {
                            part[p * c..p * c + c]
                                .copy_from_slice(&gd[p * ctotal + offset..p * ctotal + offset + c]);
                        }
                        self.accumulate(
                            grads,
                            id,
                            Tensor::from_op("concat-vjp", vec![h, w, c], part),
                        );
                    }
                    offset += c;
                }
            }
            Op::Add { lhs, rhs } => {
                self.accumulate(grads, *lhs, gout.clone());
                self.accumulate(grads, *rhs, gout.clone());
            }
            Op::Sub { lhs, rhs } => {
                self.accumulate(grads, *lhs, gout.clone());
                self.accumulate(grads, *rhs, gout.map("sub-vjp", |v| -v));
            }
            Op::Mul { lhs, rhs } => {
                let a = self.value(*lhs);
                let b = self.value(*rhs);
                if self.nodes[lhs.0].needs_grad {
                    let data = gout.data().iter().zip(b.data()).map(|(&g, &y)| g * y).collect();
                    self.accumulate(grads, *lhs, Tensor::from_op("mul-vjp", a.shape().to_vec(), data));
                }
                if self.nodes[rhs.0].needs_grad {
                    let data = gout.data().iter().zip(a.data()).map(|(&g, &x)| g * x).collect();
                    self.accumulate(grads, *rhs, Tensor::from_op("mul-vjp", b.shape().to_vec(), data));
                }
            }
            Op::Scale { input, factor } => {
                let f = *factor;
                self.accumulate(grads, *input, gout.map("scale-vjp", |v| v * f));
            }
            Op::MulConst { input, weights } => {
                let data = gout.data().iter().zip(weights.data()).map(|(&g, &w)| g * w).collect();
                self.accumulate(
                    grads,
                    *input,
                    Tensor::from_op("mul_const-vjp", weights.shape().to_vec(), data),
                );
            }
            Op::Sum { input } => {
                let g = gout.item();
                let shape = self.value(*input).shape().to_vec();
                let n: usize = shape.iter().product();
                self.accumulate(grads, *input, Tensor::from_op("sum-vjp", shape, vec![g; n]));
            }
            Op::Custom { inputs, op } => {
                let tensors: Vec<&Tensor> = inputs.iter().map(|&id| self.value(id)).collect();
                let parts = op.vjp(gout, &tensors, &self.nodes[idx].value);
                debug_assert_eq!(parts.len(), inputs.len(), "{}: vjp arity", op.name());
                for (&id, part) in inputs.iter().zip(parts) {
                    if let Some(p) = part {
                        self.accumulate(grads, id, p);
                    }
                }
            }
        }
    }

    fn backward_conv2d(
        &self,
        input: VarId,
        kernel: VarId,
        stride: usize,
        pad: usize,
        gout: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let x = self.value(input);
        let k = self.value(kernel);
        let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (kh, kw, _, cout) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        let (oh, ow) = (gout.shape()[0], gout.shape()[1]);
        let gd = gout.data();
        let kd = k.data();

        if self.nodes[input.0].needs_grad {
            let mut gin = vec![0.0; h * w * cin];
            gin.par_chunks_mut(w * cin).enumerate().for_each(|(ii, row)| {
                for ki in 0..kh {
                    let t = ii as isize + pad as isize - ki as isize;
                    if t < 0 || (t as usize) % stride != 0 {
                        continue;
                    }
                    let oi = t as usize / stride;
                    if oi >= oh {
                        continue;
                    }
                    for kj in 0..kw {
                        let kbase = (ki * kw + kj) * cin * cout;
                        for jj in 0..w {
                            let u = jj as isize + pad as isize - kj as isize;
                            if u < 0 || (u as usize) % stride != 0 {
                                continue;
                            }
                            let oj = u as usize / stride;
                            if oj >= ow {
                                continue;
                            }
                            let gpx = &gd[(oi * ow + oj) * cout..(oi * ow + oj) * cout + cout];
                            let dst = &mut row[jj * cin..jj * cin + cin];
                            let kblock = &kd[kbase..kbase + cin * cout];
                            for (d, krow) in dst.iter_mut().zip(kblock.chunks_exact(cout)) {
                                let mut acc = 0.0;
                                for (&g, &kv) in gpx.iter().zip(krow) {
                                    acc += g * kv;
                                }
                                *d += acc;
                            }
                        }
                    }
                }
            });
            self.accumulate(grads, input, Tensor::from_op("conv2d-vjp-in", vec![h, w, cin], gin));
        }

        if self.nodes[kernel.0].needs_grad {
            let xd = x.data();
            let mut gk = vec![0.0; kh * kw * cin * cout];
            for oi in 0..oh {
                for oj in 0..ow {
                    let gpx = &gd[(oi * ow + oj) * cout..(oi * ow + oj) * cout + cout];
                    for ki in 0..kh {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for kj in 0..kw {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            let px = &xd[((ii as usize) * w + jj as usize) * cin..][..cin];
                            let kbase = (ki * kw + kj) * cin * cout;
                            for (ci, &xv) in px.iter().enumerate() {
                                let dst = &mut gk[kbase + ci * cout..kbase + ci * cout + cout];
                                for (co, d) in dst.iter_mut().enumerate() {
                                    *d += xv * gpx[co];
                                }
                            }
                        }
                    }
                }
            }
            self.accumulate(
                grads,
                kernel,
                Tensor::from_op("conv2d-vjp-ker", vec![kh, kw, cin, cout], gk),
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3(h: usize, w: usize, c: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![h, w, c], data).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel() {
        // 1x1 kernel with identity weights leaves the input unchanged.
        let mut g = Graph::new();
        let x = g.leaf(t3(2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]), false);
        let k = g.leaf(
            Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            false,
        );
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv2d_zero_kernel_zero_output_and_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(t3(3, 3, 1, (0..9).map(|v| v as f64).collect()), true);
        let k = g.leaf(Tensor::zeros(vec![3, 3, 1, 1]), false);
        let y = g.conv2d(x, k, 1, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_box_kernel_constant_interior() {
        // 3x3 box kernel (all 1/9) over a constant image keeps the constant in
        // the interior where the window is fully inside.
        let c = 2.5;
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![5, 5, 1], c).unwrap(), false);
        let k = g.leaf(Tensor::full(vec![3, 3, 1, 1], 1.0 / 9.0).unwrap(), false);
        let y = g.conv2d(x, k, 1, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - c).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_channel_mismatch_names_dimension() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![4, 4, 3]), false);
        let k = g.leaf(Tensor::zeros(vec![3, 3, 2, 4]), false);
        let err = g.conv2d(x, k, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("channel"), "got: {msg}");
    }

    #[test]
    fn avg_pool_identity_and_mean() {
        let mut g = Graph::new();
        let x = g.leaf(t3(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]), false);
        let same = g.avg_pool(x, 1, 1).unwrap();
        assert_eq!(g.value(same), g.value(x));
        let m = g.avg_pool(x, 2, 2).unwrap();
        assert_eq!(g.value(m).data(), &[2.5]);
    }

    #[test]
    fn avg_pool_rejects_oversized_window() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![2, 2, 1]), false);
        assert!(g.avg_pool(x, 3, 1).is_err());
    }

    #[test]
    fn avg_pool_constant_input_constant_output() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![6, 6, 2], -0.75).unwrap(), false);
        let y = g.avg_pool(x, 2, 2).unwrap();
        for &v in g.value(y).data() {
            assert!((v + 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn leaky_relu_values_and_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t3(1, 1, 3, vec![0.0, -2.0, 3.0]), true);
        let y = g.leaky_relu(x, 0.1).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, -0.2, 3.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        // Gradient is slope at v=0 (tie-break), slope for v<0, 1 for v>0.
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.1, 0.1, 1.0]);
    }

    #[test]
    fn leaky_relu_rejects_bad_slope() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![1, 1, 1]), false);
        assert!(g.leaky_relu(x, 0.0).is_err());
        assert!(g.leaky_relu(x, 1.0).is_err());
    }

    #[test]
    fn upsample_identity_replicate_and_backward() {
        let mut g = Graph::new();
        let x = g.leaf(t3(1, 1, 1, vec![7.0]), true);
        let same = g.upsample_nearest(x, 1, 1).unwrap();
        assert_eq!(g.value(same).data(), &[7.0]);
        let up = g.upsample_nearest(x, 2, 2).unwrap();
        assert_eq!(g.value(up).data(), &[7.0; 4]);
        // Backward of an all-ones gradient on the 2x block sums to 4.
        let s = g.sum(up);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn upsample_rejects_non_multiple() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![2, 2, 1]), false);
        assert!(g.upsample_nearest(x, 3, 4).is_err());
    }

    #[test]
    fn backward_sum_is_ones_and_quadratic_is_2x() {
        let mut g = Graph::new();
        let x = g.leaf(t3(2, 1, 2, vec![1.0, -2.0, 0.5, 3.0]), true);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0; 4]);

        let mut g = Graph::new();
        let x = g.leaf(t3(2, 1, 2, vec![1.0, -2.0, 0.5, 3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_output() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![2, 2, 1]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn fanout_doubles_gradient() {
        // Duplicating a leaf into two summed branches doubles its gradient.
        let mut g = Graph::new();
        let x = g.leaf(t3(1, 1, 2, vec![2.0, 5.0]), true);
        let a = g.sum(x);
        let b = g.sum(x);
        let total = g.add(a, b).unwrap();
        let grads = g.backward(total).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn custom_ops_visited_in_reverse_execution_order() {
        use std::sync::Mutex;

        struct Probe {
            tag: usize,
            log: Arc<Mutex<Vec<usize>>>,
        }
        impl CustomOp for Probe {
            fn name(&self) -> &'static str {
                "probe"
            }
            fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
                Ok(inputs[0].clone())
            }
            fn vjp(&self, gout: &Tensor, _: &[&Tensor], _: &Tensor) -> Vec<Option<Tensor>> {
                self.log.lock().unwrap().push(self.tag);
                vec![Some(gout.clone())]
            }
        }

        let log = Arc::new(Mutex::new(Vec::new()));
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.0), true);
        let mut cur = x;
        for tag in 0..4 {
            cur = g
                .custom(Arc::new(Probe { tag, log: log.clone() }), &[cur])
                .unwrap();
        }
        g.backward(cur).unwrap();
        assert_eq!(*log.lock().unwrap(), vec![3, 2, 1, 0]);
    }

    #[test]
    fn concat_channels_splits_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(t3(1, 2, 1, vec![1.0, 2.0]), true);
        let b = g.leaf(t3(1, 2, 2, vec![3.0, 4.0, 5.0, 6.0]), true);
        let cat = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.value(cat).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let two = g.scale(cat, 2.0);
        let s = g.sum(two);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(a).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(grads.wrt(b).unwrap().data(), &[2.0; 4]);
    }
}
