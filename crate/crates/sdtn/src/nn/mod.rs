//! Minimal reverse-mode differentiation over [`DenseTensor`] values and the
//! layer set the classifier needs: 3D/2D convolution, depthwise-separable
//! convolution, channel attention, affine maps, activations, and softmax
//! cross-entropy.
//!
//! A [`Graph`] owns the computation nodes; values are computed eagerly as
//! ops are added and [`Graph::backward`] accumulates gradients in reverse
//! topological (creation) order. Channel layout is channels-first:
//! `[C, H, W]` for 2D maps and `[C, D, H, W]` for 3D volumes.

use crate::error::{Result, SdtnError};
use crate::sdtn::Hyperparams;
use crate::tensor::DenseTensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Output extent and leading pad for one spatial axis.
fn axis_out(n: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if k == 0 || stride == 0 {
        return Err(SdtnError::Shape("kernel extent and stride must be >= 1".into()));
    }
    match padding {
        Padding::Valid => {
            if n < k {
                return Err(SdtnError::Shape(format!(
                    "input extent {n} smaller than kernel {k} under valid padding"
                )));
            }
            Ok(((n - k) / stride + 1, 0))
        }
        Padding::Same => {
            let out = n.div_ceil(stride);
            let pad_total = ((out - 1) * stride + k).saturating_sub(n);
            Ok((out, pad_total / 2))
        }
    }
}

/// 3D convolution geometry. Kernel order is (depth, height, width).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conv3dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    #[serde(default = "one")]
    pub stride: usize,
    pub padding: Padding,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 2],
    #[serde(default = "one")]
    pub stride: usize,
    pub padding: Padding,
}

fn one() -> usize {
    1
}

impl Conv3dSpec {
    pub fn weight_dims(&self) -> [usize; 5] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
        ]
    }

    /// Output dims `[C_out, D', H', W']` for an input `[C_in, D, H, W]`.
    pub fn out_dims(&self, in_dims: &[usize]) -> Result<[usize; 4]> {
        if in_dims.len() != 4 || in_dims[0] != self.in_channels {
            return Err(SdtnError::Shape(format!(
                "conv3d expects [C={}, D, H, W], got {in_dims:?}",
                self.in_channels
            )));
        }
        let (od, _) = axis_out(in_dims[1], self.kernel[0], self.stride, self.padding)?;
        let (oh, _) = axis_out(in_dims[2], self.kernel[1], self.stride, self.padding)?;
        let (ow, _) = axis_out(in_dims[3], self.kernel[2], self.stride, self.padding)?;
        Ok([self.out_channels, od, oh, ow])
    }
}

impl Conv2dSpec {
    pub fn weight_dims(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel[0],
            self.kernel[1],
        ]
    }

    pub fn out_dims(&self, in_dims: &[usize]) -> Result<[usize; 3]> {
        if in_dims.len() != 3 || in_dims[0] != self.in_channels {
            return Err(SdtnError::Shape(format!(
                "conv2d expects [C={}, H, W], got {in_dims:?}",
                self.in_channels
            )));
        }
        let (oh, _) = axis_out(in_dims[1], self.kernel[0], self.stride, self.padding)?;
        let (ow, _) = axis_out(in_dims[2], self.kernel[1], self.stride, self.padding)?;
        Ok([self.out_channels, oh, ow])
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv3d { x: Var, w: Var, b: Var, spec: Conv3dSpec },
    Conv2d { x: Var, w: Var, b: Var, spec: Conv2dSpec },
    DepthwiseConv2d { x: Var, w: Var, b: Var, padding: Padding },
    Concat { a: Var, b: Var },
    Gap { x: Var },
    Affine { x: Var, w: Var, b: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    ChannelScale { gate: Var, x: Var },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Softmax { x: Var },
    SoftmaxXent { logits: Var, label: usize },
    SqDiff { a: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    SumScalars { xs: Vec<Var> },
}

struct Node {
    value: DenseTensor,
    grad: DenseTensor,
    op: Op,
}

/// Computation tape. Ops may only reference earlier nodes, so reverse
/// creation order is a reverse topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: DenseTensor, op: Op) -> Var {
        let grad = DenseTensor::zeros(value.shape().clone());
        self.nodes.push(Node { value, grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: DenseTensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &DenseTensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &DenseTensor {
        &self.nodes[v.0].grad
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.count(), 1);
        self.nodes[v.0].value.data()[0]
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, spec: &Conv3dSpec) -> Result<Var> {
        let xd = self.value(x).dims().to_vec();
        let out_dims = spec.out_dims(&xd)?;
        if self.value(w).dims() != spec.weight_dims() {
            return Err(SdtnError::Shape(format!(
                "conv3d weight dims {:?} do not match spec {:?}",
                self.value(w).dims(),
                spec.weight_dims()
            )));
        }
        if self.value(b).dims() != [spec.out_channels] {
            return Err(SdtnError::Shape("conv3d bias dims mismatch".into()));
        }
        let (_, pd) = axis_out(xd[1], spec.kernel[0], spec.stride, spec.padding)?;
        let (_, ph) = axis_out(xd[2], spec.kernel[1], spec.stride, spec.padding)?;
        let (_, pw) = axis_out(xd[3], spec.kernel[2], spec.stride, spec.padding)?;
        let (ci, d, h, wd) = (xd[0], xd[1], xd[2], xd[3]);
        let [co, od, oh, ow] = out_dims;
        let [kd, kh, kw] = spec.kernel;
        let s = spec.stride;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; co * od * oh * ow];
        for oc in 0..co {
            for zd in 0..od {
                for zh in 0..oh {
                    for zw in 0..ow {
                        let mut acc = bv[oc];
                        for ic in 0..ci {
                            for fd in 0..kd {
                                let id = (zd * s + fd).wrapping_sub(pd);
                                if id >= d {
                                    continue;
                                }
                                for fh in 0..kh {
                                    let ih = (zh * s + fh).wrapping_sub(ph);
                                    if ih >= h {
                                        continue;
                                    }
                                    for fw in 0..kw {
                                        let iw = (zw * s + fw).wrapping_sub(pw);
                                        if iw >= wd {
                                            continue;
                                        }
                                        acc += xv[((ic * d + id) * h + ih) * wd + iw]
                                            * wv[(((oc * ci + ic) * kd + fd) * kh + fh) * kw + fw];
                                    }
                                }
                            }
                        }
                        out[((oc * od + zd) * oh + zh) * ow + zw] = acc;
                    }
                }
            }
        }
        let value = DenseTensor::from_dims(&out_dims, out)?;
        Ok(self.push(value, Op::Conv3d { x, w, b, spec: spec.clone() }))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: &Conv2dSpec) -> Result<Var> {
        let xd = self.value(x).dims().to_vec();
        let out_dims = spec.out_dims(&xd)?;
        if self.value(w).dims() != spec.weight_dims() {
            return Err(SdtnError::Shape(format!(
                "conv2d weight dims {:?} do not match spec {:?}",
                self.value(w).dims(),
                spec.weight_dims()
            )));
        }
        if self.value(b).dims() != [spec.out_channels] {
            return Err(SdtnError::Shape("conv2d bias dims mismatch".into()));
        }
        let (_, ph) = axis_out(xd[1], spec.kernel[0], spec.stride, spec.padding)?;
        let (_, pw) = axis_out(xd[2], spec.kernel[1], spec.stride, spec.padding)?;
        let (ci, h, wd) = (xd[0], xd[1], xd[2]);
        let [co, oh, ow] = out_dims;
        let [kh, kw] = spec.kernel;
        let s = spec.stride;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; co * oh * ow];
        for oc in 0..co {
            for zh in 0..oh {
                for zw in 0..ow {
                    let mut acc = bv[oc];
                    for ic in 0..ci {
                        for fh in 0..kh {
                            let ih = (zh * s + fh).wrapping_sub(ph);
                            if ih >= h {
                                continue;
                            }
                            for fw in 0..kw {
                                let iw = (zw * s + fw).wrapping_sub(pw);
                                if iw >= wd {
                                    continue;
                                }
                                acc += xv[(ic * h + ih) * wd + iw]
                                    * wv[((oc * ci + ic) * kh + fh) * kw + fw];
                            }
                        }
                    }
                    out[(oc * oh + zh) * ow + zw] = acc;
                }
            }
        }
        let value = DenseTensor::from_dims(&out_dims, out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, spec: spec.clone() }))
    }

    /// One spatial filter per input channel: x `[C, H, W]`, w `[C, kh, kw]`,
    /// b `[C]`. Stride 1.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Var, padding: Padding) -> Result<Var> {
        let xd = self.value(x).dims().to_vec();
        if xd.len() != 3 {
            return Err(SdtnError::Shape("depthwise conv expects [C, H, W]".into()));
        }
        let wd_dims = self.value(w).dims().to_vec();
        if wd_dims.len() != 3 || wd_dims[0] != xd[0] {
            return Err(SdtnError::Shape(format!(
                "depthwise weight dims {wd_dims:?} do not match input channels {}",
                xd[0]
            )));
        }
        if self.value(b).dims() != [xd[0]] {
            return Err(SdtnError::Shape("depthwise bias dims mismatch".into()));
        }
        let (c, h, wdt) = (xd[0], xd[1], xd[2]);
        let (kh, kw) = (wd_dims[1], wd_dims[2]);
        let (oh, ph) = axis_out(h, kh, 1, padding)?;
        let (ow, pw) = axis_out(wdt, kw, 1, padding)?;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for zh in 0..oh {
                for zw in 0..ow {
                    let mut acc = bv[ch];
                    for fh in 0..kh {
                        let ih = (zh + fh).wrapping_sub(ph);
                        if ih >= h {
                            continue;
                        }
                        for fw in 0..kw {
                            let iw = (zw + fw).wrapping_sub(pw);
                            if iw >= wdt {
                                continue;
                            }
                            acc += xv[(ch * h + ih) * wdt + iw] * wv[(ch * kh + fh) * kw + fw];
                        }
                    }
                    out[(ch * oh + zh) * ow + zw] = acc;
                }
            }
        }
        let value = DenseTensor::from_dims(&[c, oh, ow], out)?;
        Ok(self.push(value, Op::DepthwiseConv2d { x, w, b, padding }))
    }

    /// Channel-axis concatenation of two `[C, H, W]` maps.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let ad = self.value(a).dims().to_vec();
        let bd = self.value(b).dims().to_vec();
        if ad.len() != 3 || bd.len() != 3 || ad[1..] != bd[1..] {
            return Err(SdtnError::Shape(format!(
                "concat spatial mismatch: {ad:?} vs {bd:?}"
            )));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let value = DenseTensor::from_dims(&[ad[0] + bd[0], ad[1], ad[2]], data)?;
        Ok(self.push(value, Op::Concat { a, b }))
    }

    /// Global average pool per channel: `[C, H, W]` -> `[C]`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let xd = self.value(x).dims().to_vec();
        if xd.len() != 3 {
            return Err(SdtnError::Shape("gap expects [C, H, W]".into()));
        }
        let (c, spatial) = (xd[0], xd[1] * xd[2]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; c];
        for ch in 0..c {
            out[ch] = xv[ch * spatial..(ch + 1) * spatial].iter().sum::<f64>() / spatial as f64;
        }
        let value = DenseTensor::from_dims(&[c], out)?;
        Ok(self.push(value, Op::Gap { x }))
    }

    /// y = W x + b with x `[in]`, W `[out, in]`, b `[out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xd = self.value(x).dims().to_vec();
        let wd = self.value(w).dims().to_vec();
        if xd.len() != 1 || wd.len() != 2 || wd[1] != xd[0] {
            return Err(SdtnError::Shape(format!(
                "affine dims mismatch: x {xd:?}, W {wd:?}"
            )));
        }
        if self.value(b).dims() != [wd[0]] {
            return Err(SdtnError::Shape("affine bias dims mismatch".into()));
        }
        let (o, i) = (wd[0], wd[1]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; o];
        for r in 0..o {
            let mut acc = bv[r];
            for c in 0..i {
                acc += wv[r * i + c] * xv[c];
            }
            out[r] = acc;
        }
        let value = DenseTensor::from_dims(&[o], out)?;
        Ok(self.push(value, Op::Affine { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(value, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        self.push(value, Op::Sigmoid { x })
    }

    /// Per-channel gate: gate `[C]` broadcast-multiplied over x `[C, H, W]`.
    pub fn channel_scale(&mut self, gate: Var, x: Var) -> Result<Var> {
        let xd = self.value(x).dims().to_vec();
        if xd.len() != 3 || self.value(gate).dims() != [xd[0]] {
            return Err(SdtnError::Shape(format!(
                "channel gate dims {:?} do not match map {xd:?}",
                self.value(gate).dims()
            )));
        }
        let spatial = xd[1] * xd[2];
        let gv = self.value(gate).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v *= gv[i / spatial];
        }
        Ok(self.push(value, Op::ChannelScale { gate, x }))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(dims)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(axes)?;
        Ok(self.push(value, Op::Permute { x, axes: axes.to_vec() }))
    }

    /// Stable softmax over a 1-d vector.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xd = self.value(x).dims();
        if xd.len() != 1 || xd[0] == 0 {
            return Err(SdtnError::Shape("softmax expects a non-empty vector".into()));
        }
        let data = self.value(x).data();
        let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = data.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let value = DenseTensor::from_dims(xd, exps.into_iter().map(|e| e / sum).collect())?;
        Ok(self.push(value, Op::Softmax { x }))
    }

    /// Scalar cross-entropy of softmax(logits) against a 0-based label,
    /// computed with max subtraction.
    pub fn softmax_xent(&mut self, logits: Var, label: usize) -> Result<Var> {
        let ld = self.value(logits).dims();
        if ld.len() != 1 || ld[0] == 0 {
            return Err(SdtnError::Shape("softmax_xent expects a non-empty vector".into()));
        }
        if label >= ld[0] {
            return Err(SdtnError::Value(format!(
                "label {label} out of range for {} classes",
                ld[0]
            )));
        }
        let data = self.value(logits).data();
        let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + data.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let value = DenseTensor::from_dims(&[1], vec![lse - data[label]])?;
        Ok(self.push(value, Op::SoftmaxXent { logits, label }))
    }

    /// Scalar squared Frobenius distance ||a - b||^2.
    pub fn sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(SdtnError::Shape("sq_diff shape mismatch".into()));
        }
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let value = DenseTensor::from_dims(&[1], vec![s])?;
        Ok(self.push(value, Op::SqDiff { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(SdtnError::Shape("add shape mismatch".into()));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = DenseTensor::from_vec(self.value(a).shape().clone(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut value = self.value(x).clone();
        value.scale(c);
        self.push(value, Op::Scale { x, c })
    }

    pub fn sum_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        let mut total = 0.0;
        for &v in xs {
            if self.value(v).count() != 1 {
                return Err(SdtnError::Shape("sum_scalars expects scalar nodes".into()));
            }
            total += self.value(v).data()[0];
        }
        let value = DenseTensor::from_dims(&[1], vec![total])?;
        Ok(self.push(value, Op::SumScalars { xs: xs.to_vec() }))
    }

    /// Accumulate gradients of a scalar node into every reachable node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).count() != 1 {
            return Err(SdtnError::Shape("backward expects a scalar loss".into()));
        }
        for node in &mut self.nodes {
            node.grad.scale(0.0);
        }
        self.nodes[loss.0].grad.data_mut()[0] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            let op = self.nodes[i].op.clone();
            if self.nodes[i].grad.data().iter().all(|&g| g == 0.0) {
                continue;
            }
            let up = self.nodes[i].grad.clone();
            match op {
                Op::Leaf => {}
                Op::Conv3d { x, w, b, spec } => self.conv3d_backward(&up, x, w, b, &spec)?,
                Op::Conv2d { x, w, b, spec } => self.conv2d_backward(&up, x, w, b, &spec)?,
                Op::DepthwiseConv2d { x, w, b, padding } => {
                    self.depthwise_backward(&up, x, w, b, padding)?
                }
                Op::Concat { a, b } => {
                    let split = self.nodes[a.0].value.count();
                    for (j, &g) in up.data().iter().enumerate() {
                        if j < split {
                            self.nodes[a.0].grad.data_mut()[j] += g;
                        } else {
                            self.nodes[b.0].grad.data_mut()[j - split] += g;
                        }
                    }
                }
                Op::Gap { x } => {
                    let xd = self.nodes[x.0].value.dims().to_vec();
                    let spatial = xd[1] * xd[2];
                    let inv = 1.0 / spatial as f64;
                    for (j, g) in self.nodes[x.0].grad.data_mut().iter_mut().enumerate() {
                        *g += up.data()[j / spatial] * inv;
                    }
                }
                Op::Affine { x, w, b } => {
                    let (o, i) = {
                        let wd = self.nodes[w.0].value.dims();
                        (wd[0], wd[1])
                    };
                    let xv = self.nodes[x.0].value.data().to_vec();
                    let wv = self.nodes[w.0].value.data().to_vec();
                    for r in 0..o {
                        let g = up.data()[r];
                        self.nodes[b.0].grad.data_mut()[r] += g;
                        for c in 0..i {
                            self.nodes[w.0].grad.data_mut()[r * i + c] += g * xv[c];
                            self.nodes[x.0].grad.data_mut()[c] += g * wv[r * i + c];
                        }
                    }
                }
                Op::Relu { x } => {
                    let xv = self.nodes[x.0].value.data().to_vec();
                    for (j, g) in self.nodes[x.0].grad.data_mut().iter_mut().enumerate() {
                        if xv[j] > 0.0 {
                            *g += up.data()[j];
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    let yv = self.nodes[i].value.data().to_vec();
                    for (j, g) in self.nodes[x.0].grad.data_mut().iter_mut().enumerate() {
                        *g += up.data()[j] * yv[j] * (1.0 - yv[j]);
                    }
                }
                Op::ChannelScale { gate, x } => {
                    let xd = self.nodes[x.0].value.dims().to_vec();
                    let spatial = xd[1] * xd[2];
                    let gv = self.nodes[gate.0].value.data().to_vec();
                    let xv = self.nodes[x.0].value.data().to_vec();
                    for (j, &g) in up.data().iter().enumerate() {
                        let ch = j / spatial;
                        self.nodes[x.0].grad.data_mut()[j] += g * gv[ch];
                        self.nodes[gate.0].grad.data_mut()[ch] += g * xv[j];
                    }
                }
                Op::Reshape { x } => {
                    for (g, &u) in self.nodes[x.0].grad.data_mut().iter_mut().zip(up.data()) {
                        *g += u;
                    }
                }
                Op::Permute { x, axes } => {
                    // inverse permutation routes the gradient back
                    let mut inv = vec![0usize; axes.len()];
                    for (pos, &a) in axes.iter().enumerate() {
                        inv[a] = pos;
                    }
                    let back = up.permute(&inv)?;
                    self.nodes[x.0].grad.axpy(1.0, &back)?;
                }
                Op::Softmax { x } => {
                    let yv = self.nodes[i].value.data().to_vec();
                    let dot: f64 = up.data().iter().zip(&yv).map(|(u, y)| u * y).sum();
                    for (j, g) in self.nodes[x.0].grad.data_mut().iter_mut().enumerate() {
                        *g += yv[j] * (up.data()[j] - dot);
                    }
                }
                Op::SoftmaxXent { logits, label } => {
                    let g = up.data()[0];
                    let data = self.nodes[logits.0].value.data().to_vec();
                    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = data.iter().map(|&v| (v - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for (j, gr) in self.nodes[logits.0].grad.data_mut().iter_mut().enumerate() {
                        let p = exps[j] / sum;
                        *gr += g * (p - if j == label { 1.0 } else { 0.0 });
                    }
                }
                Op::SqDiff { a, b } => {
                    let g = up.data()[0];
                    let av = self.nodes[a.0].value.data().to_vec();
                    let bv = self.nodes[b.0].value.data().to_vec();
                    for j in 0..av.len() {
                        let d = 2.0 * g * (av[j] - bv[j]);
                        self.nodes[a.0].grad.data_mut()[j] += d;
                        self.nodes[b.0].grad.data_mut()[j] -= d;
                    }
                }
                Op::Add { a, b } => {
                    self.nodes[a.0].grad.axpy(1.0, &up)?;
                    self.nodes[b.0].grad.axpy(1.0, &up)?;
                }
                Op::Scale { x, c } => {
                    self.nodes[x.0].grad.axpy(c, &up)?;
                }
                Op::SumScalars { xs } => {
                    for v in xs {
                        self.nodes[v.0].grad.data_mut()[0] += up.data()[0];
                    }
                }
            }
        }
        Ok(())
    }

    fn conv3d_backward(&mut self, up: &DenseTensor, x: Var, w: Var, b: Var, spec: &Conv3dSpec) -> Result<()> {
        let xd = self.nodes[x.0].value.dims().to_vec();
        let (_, pd) = axis_out(xd[1], spec.kernel[0], spec.stride, spec.padding)?;
        let (_, ph) = axis_out(xd[2], spec.kernel[1], spec.stride, spec.padding)?;
        let (_, pw) = axis_out(xd[3], spec.kernel[2], spec.stride, spec.padding)?;
        let (ci, d, h, wd) = (xd[0], xd[1], xd[2], xd[3]);
        let [co, od, oh, ow] = spec.out_dims(&xd)?;
        let [kd, kh, kw] = spec.kernel;
        let s = spec.stride;
        let xv = self.nodes[x.0].value.data().to_vec();
        let wv = self.nodes[w.0].value.data().to_vec();
        for oc in 0..co {
            for zd in 0..od {
                for zh in 0..oh {
                    for zw in 0..ow {
                        let g = up.data()[((oc * od + zd) * oh + zh) * ow + zw];
                        if g == 0.0 {
                            continue;
                        }
                        self.nodes[b.0].grad.data_mut()[oc] += g;
                        for ic in 0..ci {
                            for fd in 0..kd {
                                let id = (zd * s + fd).wrapping_sub(pd);
                                if id >= d {
                                    continue;
                                }
                                for fh in 0..kh {
                                    let ih = (zh * s + fh).wrapping_sub(ph);
                                    if ih >= h {
                                        continue;
                                    }
                                    for fw in 0..kw {
                                        let iw = (zw * s + fw).wrapping_sub(pw);
                                        if iw >= wd {
                                            continue;
                                        }
                                        let xi = ((ic * d + id) * h + ih) * wd + iw;
                                        let wi = (((oc * ci + ic) * kd + fd) * kh + fh) * kw + fw;
                                        self.nodes[w.0].grad.data_mut()[wi] += g * xv[xi];
                                        self.nodes[x.0].grad.data_mut()[xi] += g * wv[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn conv2d_backward(&mut self, up: &DenseTensor, x: Var, w: Var, b: Var, spec: &Conv2dSpec) -> Result<()> {
        let xd = self.nodes[x.0].value.dims().to_vec();
        let (_, ph) = axis_out(xd[1], spec.kernel[0], spec.stride, spec.padding)?;
        let (_, pw) = axis_out(xd[2], spec.kernel[1], spec.stride, spec.padding)?;
        let (ci, h, wd) = (xd[0], xd[1], xd[2]);
        let [co, oh, ow] = spec.out_dims(&xd)?;
        let [kh, kw] = spec.kernel;
        let s = spec.stride;
        let xv = self.nodes[x.0].value.data().to_vec();
        let wv = self.nodes[w.0].value.data().to_vec();
        for oc in 0..co {
            for zh in 0..oh {
                for zw in 0..ow {
                    let g = up.data()[(oc * oh + zh) * ow + zw];
                    if g == 0.0 {
                        continue;
                    }
                    self.nodes[b.0].grad.data_mut()[oc] += g;
                    for ic in 0..ci {
                        for fh in 0..kh {
                            let ih = (zh * s + fh).wrapping_sub(ph);
                            if ih >= h {
                                continue;
                            }
                            for fw in 0..kw {
                                let iw = (zw * s + fw).wrapping_sub(pw);
                                if iw >= wd {
                                    continue;
                                }
                                let xi = (ic * h + ih) * wd + iw;
                                let wi = ((oc * ci + ic) * kh + fh) * kw + fw;
                                self.nodes[w.0].grad.data_mut()[wi] += g * xv[xi];
                                self.nodes[x.0].grad.data_mut()[xi] += g * wv[wi];
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn depthwise_backward(&mut self, up: &DenseTensor, x: Var, w: Var, b: Var, padding: Padding) -> Result<()> {
        let xd = self.nodes[x.0].value.dims().to_vec();
        let wd_dims = self.nodes[w.0].value.dims().to_vec();
        let (c, h, wdt) = (xd[0], xd[1], xd[2]);
        let (kh, kw) = (wd_dims[1], wd_dims[2]);
        let (oh, ph) = axis_out(h, kh, 1, padding)?;
        let (ow, pw) = axis_out(wdt, kw, 1, padding)?;
        let xv = self.nodes[x.0].value.data().to_vec();
        let wv = self.nodes[w.0].value.data().to_vec();
        for ch in 0..c {
            for zh in 0..oh {
                for zw in 0..ow {
                    let g = up.data()[(ch * oh + zh) * ow + zw];
                    if g == 0.0 {
                        continue;
                    }
                    self.nodes[b.0].grad.data_mut()[ch] += g;
                    for fh in 0..kh {
                        let ih = (zh + fh).wrapping_sub(ph);
                        if ih >= h {
                            continue;
                        }
                        for fw in 0..kw {
                            let iw = (zw + fw).wrapping_sub(pw);
                            if iw >= wdt {
                                continue;
                            }
                            let xi = (ch * h + ih) * wdt + iw;
                            let wi = (ch * kh + fh) * kw + fw;
                            self.nodes[w.0].grad.data_mut()[wi] += g * xv[xi];
                            self.nodes[x.0].grad.data_mut()[xi] += g * wv[wi];
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Depthwise filter followed by a 1x1 cross-channel (pointwise) convolution.
/// Parameter count is C*kh*kw + C (depthwise with bias) plus C*C_out + C_out.
pub fn depthwise_separable(
    g: &mut Graph,
    x: Var,
    dw_w: Var,
    dw_b: Var,
    pw_w: Var,
    pw_b: Var,
    padding: Padding,
) -> Result<Var> {
    let d = g.depthwise_conv2d(x, dw_w, dw_b, padding)?;
    let c = g.value(d).dims()[0];
    let c_out = g.value(pw_w).dims()[0];
    let spec = Conv2dSpec {
        in_channels: c,
        out_channels: c_out,
        kernel: [1, 1],
        stride: 1,
        padding: Padding::Valid,
    };
    g.conv2d(d, pw_w, pw_b, &spec)
}

/// Squeeze-excitation gate: sigmoid(FC2(relu(FC1(gap(x))))) broadcast over x.
pub fn channel_attention(
    g: &mut Graph,
    x: Var,
    fc1_w: Var,
    fc1_b: Var,
    fc2_w: Var,
    fc2_b: Var,
) -> Result<Var> {
    let pooled = g.gap(x)?;
    let h = g.affine(pooled, fc1_w, fc1_b)?;
    let h = g.relu(h);
    let s = g.affine(h, fc2_w, fc2_b)?;
    let s = g.sigmoid(s);
    g.channel_scale(s, x)
}

/// Bottleneck width for a channel-attention block: ceil(C / reduction).
pub fn attention_hidden(channels: usize, reduction: usize) -> usize {
    channels.div_ceil(reduction.max(1))
}

/// p <- p - lr(iter) * g with the decayed step schedule from `hp`.
pub fn sgd_step(
    params: &mut [DenseTensor],
    grads: &[DenseTensor],
    iter: usize,
    hp: &Hyperparams,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(SdtnError::Shape("parameter/gradient count mismatch".into()));
    }
    let lr = hp.lr(iter);
    for (p, g) in params.iter_mut().zip(grads) {
        p.axpy(-lr, g)?;
    }
    Ok(())
}
