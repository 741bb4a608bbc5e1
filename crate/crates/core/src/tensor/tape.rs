//! Reverse-mode autodiff over an explicit tape of primitive nodes.
//!
//! The network needs only a handful of primitives (3-D convolution,
//! transposed convolution, max-pooling, batch normalization, ReLU, channel
//! softmax, channel concatenation, and the two losses), so each is a tape
//! node with a hand-written backward rule; no general graph machinery.
//! Nodes are appended in execution order, which is already a topological
//! order, so the backward sweep is a single reverse pass.

use super::conv;
use super::Tensor;
use crate::error::{Error, Result};

/// Forward-pass mode: training updates batch-norm running statistics,
/// inference reads them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Learnable scale/shift plus running statistics for one batch-norm layer.
#[derive(Debug, Clone)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Fraction of the batch statistic blended into the running value.
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::new(vec![channels], vec![1.0; channels])
                .expect("valid shape")
                .with_requires_grad(),
            beta: Tensor::new(vec![channels], vec![0.0; channels])
                .expect("valid shape")
                .with_requires_grad(),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Conv3d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Pointwise {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    TransposedConv3d {
        input: NodeId,
        weight: NodeId,
    },
    MaxPool3d {
        input: NodeId,
        /// Winning input element (global index) per output element.
        argmax: Vec<u32>,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        /// Per-channel mean used for normalization (batch or running).
        mean: Vec<f64>,
        /// Per-channel 1/sqrt(var + eps) used for normalization.
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu {
        input: NodeId,
    },
    SoftmaxChannels {
        input: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<u8>,
        weights: Vec<f64>,
        /// Per-voxel log-sum-exp, saved for the backward pass.
        lse: Vec<f64>,
        norm: f64,
    },
    SoftDice {
        probs: NodeId,
        targets: Vec<u8>,
        epsilon: f64,
        intersection: Vec<f64>,
        prob_sum: Vec<f64>,
        target_sum: Vec<f64>,
    },
    ScaledSum {
        input: NodeId,
        coeffs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Execution tape: build a forward pass, then call [`Tape::backward`] once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.requires_grad()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    /// Insert an input or parameter tensor (cloned) as a leaf node.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.clone(), Op::Leaf)
    }

    pub fn conv3d(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let [b, cin, x, y, z] = self.value(input).dims5()?;
        let wshape = self.value(weight).shape().to_vec();
        let cout = wshape[0];
        if wshape != [cout, cin, 3, 3, 3] {
            return Err(Error::ShapeMismatch {
                expected: vec![cout, cin, 3, 3, 3],
                got: wshape,
            });
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::ShapeMismatch {
                expected: vec![cout],
                got: self.value(bias).shape().to_vec(),
            });
        }
        let out = conv::conv3d_forward(
            self.value(input).data(),
            b,
            cin,
            x,
            y,
            z,
            self.value(weight).data(),
            cout,
            self.value(bias).data(),
        );
        let mut t = Tensor::new(vec![b, cout, x, y, z], out)?;
        t.set_requires_grad(self.requires(input) || self.requires(weight) || self.requires(bias));
        Ok(self.push(t, Op::Conv3d { input, weight, bias }))
    }

    pub fn pointwise_conv(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<NodeId> {
        let [b, cin, x, y, z] = self.value(input).dims5()?;
        let wshape = self.value(weight).shape().to_vec();
        let cout = wshape[0];
        if wshape != [cout, cin] {
            return Err(Error::ShapeMismatch {
                expected: vec![cout, cin],
                got: wshape,
            });
        }
        let out = conv::pointwise_forward(
            self.value(input).data(),
            b,
            cin,
            x * y * z,
            self.value(weight).data(),
            cout,
            self.value(bias).data(),
        );
        let mut t = Tensor::new(vec![b, cout, x, y, z], out)?;
        t.set_requires_grad(self.requires(input) || self.requires(weight) || self.requires(bias));
        Ok(self.push(t, Op::Pointwise { input, weight, bias }))
    }

    pub fn transposed_conv3d(&mut self, input: NodeId, weight: NodeId) -> Result<NodeId> {
        let [b, cin, x, y, z] = self.value(input).dims5()?;
        let wshape = self.value(weight).shape().to_vec();
        if wshape.len() != 5 || wshape[0] != cin || wshape[2..] != [2, 2, 2] {
            return Err(Error::ShapeMismatch {
                expected: vec![cin, 0, 2, 2, 2],
                got: wshape,
            });
        }
        let cout = wshape[1];
        let out = conv::tconv3d_forward(
            self.value(input).data(),
            b,
            cin,
            x,
            y,
            z,
            self.value(weight).data(),
            cout,
        );
        let mut t = Tensor::new(vec![b, cout, 2 * x, 2 * y, 2 * z], out)?;
        t.set_requires_grad(self.requires(input) || self.requires(weight));
        Ok(self.push(t, Op::TransposedConv3d { input, weight }))
    }

    /// 2x2x2 max pooling with stride 2. Ties go to the lowest linear index.
    pub fn maxpool3d(&mut self, input: NodeId) -> Result<NodeId> {
        let [b, c, x, y, z] = self.value(input).dims5()?;
        if x % 2 != 0 || y % 2 != 0 || z % 2 != 0 {
            return Err(Error::OddSpatialDim([x, y, z]));
        }
        let (ox, oy, oz) = (x / 2, y / 2, z / 2);
        let data = self.value(input).data();
        let mut out = vec![0.0; b * c * ox * oy * oz];
        let mut argmax = vec![0u32; out.len()];
        let mut o = 0;
        for slab in 0..b * c {
            let base = slab * x * y * z;
            for xo in 0..ox {
                for yo in 0..oy {
                    for zo in 0..oz {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for dx in 0..2 {
                            for dy in 0..2 {
                                for dz in 0..2 {
                                    let idx = base
                                        + ((2 * xo + dx) * y + (2 * yo + dy)) * z
                                        + 2 * zo
                                        + dz;
                                    if data[idx] > best {
                                        best = data[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        out[o] = best;
                        argmax[o] = best_idx as u32;
                        o += 1;
                    }
                }
            }
        }
        let mut t = Tensor::new(vec![b, c, ox, oy, oz], out)?;
        t.set_requires_grad(self.requires(input));
        Ok(self.push(t, Op::MaxPool3d { input, argmax }))
    }

    pub fn batchnorm_train(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BatchNormState,
    ) -> Result<NodeId> {
        self.batchnorm_impl(input, gamma, beta, Some(state))
    }

    pub fn batchnorm_infer(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &BatchNormState,
    ) -> Result<NodeId> {
        let (mean, var) = (state.running_mean.clone(), state.running_var.clone());
        self.batchnorm_with_stats(input, gamma, beta, mean, var, state.epsilon, false)
    }

    fn batchnorm_impl(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: Option<&mut BatchNormState>,
    ) -> Result<NodeId> {
        let state = state.expect("train mode requires mutable state");
        let [b, c, x, y, z] = self.value(input).dims5()?;
        let per_channel = b * x * y * z;
        if per_channel < 2 {
            return Err(Error::DegenerateBatch);
        }
        if state.channels() != c {
            return Err(Error::ShapeMismatch {
                expected: vec![c],
                got: vec![state.channels()],
            });
        }
        let vox = x * y * z;
        let data = self.value(input).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut acc = 0.0;
            for bi in 0..b {
                let slab = &data[(bi * c + ci) * vox..(bi * c + ci + 1) * vox];
                for v in slab {
                    acc += v;
                }
            }
            mean[ci] = acc / per_channel as f64;
            let mut sq = 0.0;
            for bi in 0..b {
                let slab = &data[(bi * c + ci) * vox..(bi * c + ci + 1) * vox];
                for v in slab {
                    let d = v - mean[ci];
                    sq += d * d;
                }
            }
            // Biased variance: normalization and running stats share it, so
            // infer mode with running = batch stats reproduces train mode.
            var[ci] = sq / per_channel as f64;
        }
        let m = state.momentum;
        for ci in 0..c {
            state.running_mean[ci] = (1.0 - m) * state.running_mean[ci] + m * mean[ci];
            state.running_var[ci] = (1.0 - m) * state.running_var[ci] + m * var[ci];
        }
        let eps = state.epsilon;
        self.batchnorm_with_stats(input, gamma, beta, mean, var, eps, true)
    }

    fn batchnorm_with_stats(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        var: Vec<f64>,
        epsilon: f64,
        batch_stats: bool,
    ) -> Result<NodeId> {
        let [b, c, x, y, z] = self.value(input).dims5()?;
        let vox = x * y * z;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::ShapeMismatch {
                expected: vec![c],
                got: self.value(gamma).shape().to_vec(),
            });
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + epsilon).sqrt()).collect();
        let data = self.value(input).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut out = vec![0.0; data.len()];
        for bi in 0..b {
            for ci in 0..c {
                let (mu, s) = (mean[ci], inv_std[ci]);
                let (gc, bc) = (g[ci], be[ci]);
                let base = (bi * c + ci) * vox;
                for v in 0..vox {
                    out[base + v] = gc * (data[base + v] - mu) * s + bc;
                }
            }
        }
        let mut t = Tensor::new(vec![b, c, x, y, z], out)?;
        t.set_requires_grad(
            self.requires(input) || self.requires(gamma) || self.requires(beta),
        );
        Ok(self.push(
            t,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let data = self.value(input).data();
        let out: Vec<f64> = data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let mut t = Tensor::new(self.value(input).shape().to_vec(), out).expect("same shape");
        t.set_requires_grad(self.requires(input));
        self.push(t, Op::Relu { input })
    }

    /// Per-voxel softmax over the channel axis, computed with max
    /// subtraction.
    pub fn softmax_channels(&mut self, input: NodeId) -> Result<NodeId> {
        let [b, c, x, y, z] = self.value(input).dims5()?;
        let vox = x * y * z;
        let data = self.value(input).data();
        let mut out = vec![0.0; data.len()];
        let mut maxes = vec![f64::NEG_INFINITY; vox];
        let mut sums = vec![0.0; vox];
        for bi in 0..b {
            maxes.fill(f64::NEG_INFINITY);
            sums.fill(0.0);
            for ci in 0..c {
                let slab = &data[(bi * c + ci) * vox..(bi * c + ci + 1) * vox];
                for (mx, &v) in maxes.iter_mut().zip(slab) {
                    if v > *mx {
                        *mx = v;
                    }
                }
            }
            for ci in 0..c {
                let base = (bi * c + ci) * vox;
                for v in 0..vox {
                    let e = (data[base + v] - maxes[v]).exp();
                    out[base + v] = e;
                    sums[v] += e;
                }
            }
            for ci in 0..c {
                let base = (bi * c + ci) * vox;
                for v in 0..vox {
                    out[base + v] /= sums[v];
                }
            }
        }
        let mut t = Tensor::new(vec![b, c, x, y, z], out)?;
        t.set_requires_grad(self.requires(input));
        Ok(self.push(t, Op::SoftmaxChannels { input }))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let [ba, ca, x, y, z] = self.value(a).dims5()?;
        let [bb, cb, xb, yb, zb] = self.value(b).dims5()?;
        if ba != bb || [x, y, z] != [xb, yb, zb] {
            return Err(Error::ShapeMismatch {
                expected: vec![ba, 0, x, y, z],
                got: vec![bb, cb, xb, yb, zb],
            });
        }
        let vox = x * y * z;
        let c = ca + cb;
        let mut out = vec![0.0; ba * c * vox];
        let da = self.value(a).data();
        let db = self.value(b).data();
        for bi in 0..ba {
            out[(bi * c) * vox..(bi * c + ca) * vox]
                .copy_from_slice(&da[(bi * ca) * vox..(bi * ca + ca) * vox]);
            out[(bi * c + ca) * vox..(bi * c + c) * vox]
                .copy_from_slice(&db[(bi * cb) * vox..(bi * cb + cb) * vox]);
        }
        let mut t = Tensor::new(vec![ba, c, x, y, z], out)?;
        t.set_requires_grad(self.requires(a) || self.requires(b));
        Ok(self.push(t, Op::ConcatChannels { a, b }))
    }

    /// Class-weighted cross entropy over softmax of the logits:
    /// `L = -(1/N_eff) sum_v w[t_v] * log softmax(logits)[t_v]` with
    /// `N_eff = sum_v w[t_v]`. `targets` is laid out `[b, x, y, z]`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u8],
        class_weights: &[f64],
    ) -> Result<NodeId> {
        let [b, c, x, y, z] = self.value(logits).dims5()?;
        let vox = x * y * z;
        if targets.len() != b * vox {
            return Err(Error::ShapeMismatch {
                expected: vec![b * vox],
                got: vec![targets.len()],
            });
        }
        if class_weights.len() != c {
            return Err(Error::ShapeMismatch {
                expected: vec![c],
                got: vec![class_weights.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| (t as usize) >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let data = self.value(logits).data();
        let mut lse = vec![0.0; b * vox];
        let mut maxes = vec![f64::NEG_INFINITY; vox];
        let mut sums = vec![0.0; vox];
        let mut loss = 0.0;
        let mut norm = 0.0;
        for bi in 0..b {
            maxes.fill(f64::NEG_INFINITY);
            sums.fill(0.0);
            for ci in 0..c {
                let slab = &data[(bi * c + ci) * vox..(bi * c + ci + 1) * vox];
                for (mx, &v) in maxes.iter_mut().zip(slab) {
                    if v > *mx {
                        *mx = v;
                    }
                }
            }
            for ci in 0..c {
                let base = (bi * c + ci) * vox;
                for v in 0..vox {
                    sums[v] += (data[base + v] - maxes[v]).exp();
                }
            }
            for v in 0..vox {
                let l = maxes[v] + sums[v].ln();
                lse[bi * vox + v] = l;
                let t = targets[bi * vox + v] as usize;
                let w = class_weights[t];
                loss += w * (l - data[(bi * c + t) * vox + v]);
                norm += w;
            }
        }
        if norm <= 0.0 {
            return Err(Error::InvalidConfig(
                "all voxels carry zero class weight".into(),
            ));
        }
        loss /= norm;
        let mut t = Tensor::scalar(loss);
        t.set_requires_grad(self.requires(logits));
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: class_weights.to_vec(),
                lse,
                norm,
            },
        ))
    }

    /// Soft Dice loss over foreground classes (labels 1..C):
    /// `L = 1 - (1/|F|) sum_c (2*inter_c + eps)/(psum_c + gsum_c + eps)`.
    /// `probs` must already be a probability field (softmax output).
    pub fn soft_dice(
        &mut self,
        probs: NodeId,
        targets: &[u8],
        epsilon: f64,
    ) -> Result<NodeId> {
        let [b, c, x, y, z] = self.value(probs).dims5()?;
        if c < 2 {
            return Err(Error::BadConfig(
                "Dice loss needs at least one foreground class".into(),
            ));
        }
        let vox = x * y * z;
        if targets.len() != b * vox {
            return Err(Error::ShapeMismatch {
                expected: vec![b * vox],
                got: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| (t as usize) >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let data = self.value(probs).data();
        let mut intersection = vec![0.0; c];
        let mut prob_sum = vec![0.0; c];
        let mut target_sum = vec![0.0; c];
        for bi in 0..b {
            for ci in 1..c {
                let base = (bi * c + ci) * vox;
                let t_slab = &targets[bi * vox..(bi + 1) * vox];
                let mut inter = 0.0;
                let mut psum = 0.0;
                let mut gsum = 0.0;
                for v in 0..vox {
                    let p = data[base + v];
                    psum += p;
                    if t_slab[v] as usize == ci {
                        inter += p;
                        gsum += 1.0;
                    }
                }
                intersection[ci] += inter;
                prob_sum[ci] += psum;
                target_sum[ci] += gsum;
            }
        }
        let fg = (c - 1) as f64;
        let mut dice_sum = 0.0;
        for ci in 1..c {
            dice_sum += (2.0 * intersection[ci] + epsilon)
                / (prob_sum[ci] + target_sum[ci] + epsilon);
        }
        let loss = 1.0 - dice_sum / fg;
        let mut t = Tensor::scalar(loss);
        t.set_requires_grad(self.requires(probs));
        Ok(self.push(
            t,
            Op::SoftDice {
                probs,
                targets: targets.to_vec(),
                epsilon,
                intersection,
                prob_sum,
                target_sum,
            },
        ))
    }

    /// Fixed linear projection to a scalar: `sum_i coeffs[i] * x[i]`.
    /// Turns any node into a loss for gradient diagnostics.
    pub fn scaled_sum(&mut self, input: NodeId, coeffs: &[f64]) -> Result<NodeId> {
        if coeffs.len() != self.value(input).numel() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.value(input).numel()],
                got: vec![coeffs.len()],
            });
        }
        let v: f64 = self
            .value(input)
            .data()
            .iter()
            .zip(coeffs)
            .map(|(x, c)| x * c)
            .sum();
        let mut t = Tensor::scalar(v);
        t.set_requires_grad(self.requires(input));
        Ok(self.push(
            t,
            Op::ScaledSum {
                input,
                coeffs: coeffs.to_vec(),
            },
        ))
    }

    /// Run the reverse sweep from a scalar loss node.
    ///
    /// Gradients of leaf nodes remain readable afterwards via [`Tape::grad`];
    /// interior gradients are consumed as the sweep moves past them.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        assert!(
            self.requires(loss),
            "loss does not depend on any differentiable input"
        );
        self.nodes[loss.0].value.grad_mut()[0] = 1.0;
        for id in (0..=loss.0).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            if self.nodes[id].value.grad().is_none() {
                continue;
            }
            self.step_backward(id);
        }
    }

    fn add_grad(&mut self, id: NodeId, delta: &[f64]) {
        let g = self.nodes[id.0].value.grad_mut();
        debug_assert_eq!(g.len(), delta.len());
        for (gv, dv) in g.iter_mut().zip(delta) {
            *gv += dv;
        }
    }

    fn step_backward(&mut self, id: usize) {
        // The node's own gradient is finished once its backward rule runs;
        // move it out instead of copying (nodes earlier on the tape cannot
        // feed it again).
        let gout = std::mem::take(
            self.nodes[id].value.grad_mut(),
        );
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv3d { input, weight, bias } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let [b, cin, x, y, z] = self.value(input).dims5().expect("checked at forward");
                let cout = self.value(weight).shape()[0];
                let (gin, gw, gb) = conv::conv3d_backward(
                    self.value(input).data(),
                    b,
                    cin,
                    x,
                    y,
                    z,
                    self.value(weight).data(),
                    cout,
                    &gout,
                );
                if self.requires(input) {
                    self.add_grad(input, &gin);
                }
                if self.requires(weight) {
                    self.add_grad(weight, &gw);
                }
                if self.requires(bias) {
                    self.add_grad(bias, &gb);
                }
            }
            Op::Pointwise { input, weight, bias } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let [b, cin, x, y, z] = self.value(input).dims5().expect("checked at forward");
                let cout = self.value(weight).shape()[0];
                let (gin, gw, gb) = conv::pointwise_backward(
                    self.value(input).data(),
                    b,
                    cin,
                    x * y * z,
                    self.value(weight).data(),
                    cout,
                    &gout,
                );
                if self.requires(input) {
                    self.add_grad(input, &gin);
                }
                if self.requires(weight) {
                    self.add_grad(weight, &gw);
                }
                if self.requires(bias) {
                    self.add_grad(bias, &gb);
                }
            }
            Op::TransposedConv3d { input, weight } => {
                let (input, weight) = (*input, *weight);
                let [b, cin, x, y, z] = self.value(input).dims5().expect("checked at forward");
                let cout = self.value(weight).shape()[1];
                let (gin, gw) = conv::tconv3d_backward(
                    self.value(input).data(),
                    b,
                    cin,
                    x,
                    y,
                    z,
                    self.value(weight).data(),
                    cout,
                    &gout,
                );
                if self.requires(input) {
                    self.add_grad(input, &gin);
                }
                if self.requires(weight) {
                    self.add_grad(weight, &gw);
                }
            }
            Op::MaxPool3d { input, argmax } => {
                let input = *input;
                let mut gin = vec![0.0; self.value(input).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    gin[src as usize] += gout[o];
                }
                if self.requires(input) {
                    self.add_grad(input, &gin);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let (input, gamma, beta) = (*input, *gamma, *beta);
                let batch_stats = *batch_stats;
                let (mean, inv_std) = (mean.clone(), inv_std.clone());
                let [b, c, x, y, z] = self.value(input).dims5().expect("checked at forward");
                let vox = x * y * z;
                let n = (b * vox) as f64;
                let data = self.value(input).data();
                let g = self.value(gamma).data();

                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut gin = vec![0.0; data.len()];
                for ci in 0..c {
                    let (mu, s) = (mean[ci], inv_std[ci]);
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ci) * vox;
                        for v in 0..vox {
                            let dy = gout[base + v];
                            sum_dy += dy;
                            sum_dy_xhat += dy * (data[base + v] - mu) * s;
                        }
                    }
                    dbeta[ci] = sum_dy;
                    dgamma[ci] = sum_dy_xhat;
                    let gc = g[ci];
                    for bi in 0..b {
                        let base = (bi * c + ci) * vox;
                        for v in 0..vox {
                            let dy = gout[base + v];
                            let xhat = (data[base + v] - mu) * s;
                            gin[base + v] = if batch_stats {
                                gc * s * (dy - sum_dy / n - xhat * sum_dy_xhat / n)
                            } else {
                                // Running statistics are constants.
                                gc * s * dy
                            };
                        }
                    }
                }
                if self.requires(input) {
                    self.add_grad(input, &gin);
                }
                if self.requires(gamma) {
                    self.add_grad(gamma, &dgamma);
                }
                if self.requires(beta) {
                    self.add_grad(beta, &dbeta);
                }
            }
            Op::Relu { input } => {
                let input = *input;
                let data = self.value(input).data();
                // Subgradient at 0 is defined as 0.
                let gin: Vec<f64> = data
                    .iter()
                    .zip(&gout)
                    .map(|(&x, &dy)| if x > 0.0 { dy } else { 0.0 })
                    .collect();
                if self.requires(input) {
                    self.add_grad(input, &gin);
                }
            }
            Op::SoftmaxChannels { input } => {
                let input = *input;
                let [b, c, x, y, z] = self.value(input).dims5().expect("checked at forward");
                let vox = x * y * z;
                let p = self.nodes[id].value.data();
                let mut gin = vec![0.0; p.len()];
                let mut dot = vec![0.0; vox];
                for bi in 0..b {
                    dot.fill(0.0);
                    for ci in 0..c {
                        let base = (bi * c + ci) * vox;
                        for v in 0..vox {
                            dot[v] += p[base + v] * gout[base + v];
                        }
                    }
                    for ci in 0..c {
                        let base = (bi * c + ci) * vox;
                        for v in 0..vox {
                            gin[base + v] = p[base + v] * (gout[base + v] - dot[v]);
                        }
                    }
                }
                if self.requires(input) {
                    self.add_grad(input, &gin);
                }
            }
            Op::ConcatChannels { a, b } => {
                let (a, b) = (*a, *b);
                let [bb, ca, x, y, z] = self.value(a).dims5().expect("checked at forward");
                let cb = self.value(b).shape()[1];
                let vox = x * y * z;
                let c = ca + cb;
                let mut ga = vec![0.0; self.value(a).numel()];
                let mut gb = vec![0.0; self.value(b).numel()];
                for bi in 0..bb {
                    ga[(bi * ca) * vox..(bi * ca + ca) * vox]
                        .copy_from_slice(&gout[(bi * c) * vox..(bi * c + ca) * vox]);
                    gb[(bi * cb) * vox..(bi * cb + cb) * vox]
                        .copy_from_slice(&gout[(bi * c + ca) * vox..(bi * c + c) * vox]);
                }
                if self.requires(a) {
                    self.add_grad(a, &ga);
                }
                if self.requires(b) {
                    self.add_grad(b, &gb);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                lse,
                norm,
            } => {
                let logits = *logits;
                let norm = *norm;
                let (targets, weights, lse) = (targets.clone(), weights.clone(), lse.clone());
                let [b, c, x, y, z] = self.value(logits).dims5().expect("checked at forward");
                let vox = x * y * z;
                let data = self.value(logits).data();
                let upstream = gout[0];
                let mut gin = vec![0.0; data.len()];
                for bi in 0..b {
                    for v in 0..vox {
                        let t = targets[bi * vox + v] as usize;
                        let f = upstream * weights[t] / norm;
                        let l = lse[bi * vox + v];
                        for ci in 0..c {
                            let base = (bi * c + ci) * vox;
                            let p = (data[base + v] - l).exp();
                            gin[base + v] = f * (p - if ci == t { 1.0 } else { 0.0 });
                        }
                    }
                }
                if self.requires(logits) {
                    self.add_grad(logits, &gin);
                }
            }
            Op::SoftDice {
                probs,
                targets,
                epsilon,
                intersection,
                prob_sum,
                target_sum,
            } => {
                let probs = *probs;
                let eps = *epsilon;
                let (targets, inter, psum, gsum) = (
                    targets.clone(),
                    intersection.clone(),
                    prob_sum.clone(),
                    target_sum.clone(),
                );
                let [b, c, x, y, z] = self.value(probs).dims5().expect("checked at forward");
                let vox = x * y * z;
                let fg = (c - 1) as f64;
                let upstream = gout[0];
                let mut gin = vec![0.0; self.value(probs).numel()];
                for ci in 1..c {
                    let denom = psum[ci] + gsum[ci] + eps;
                    let numer = 2.0 * inter[ci] + eps;
                    for bi in 0..b {
                        let base = (bi * c + ci) * vox;
                        let t_slab = &targets[bi * vox..(bi + 1) * vox];
                        for v in 0..vox {
                            let gt = if t_slab[v] as usize == ci { 1.0 } else { 0.0 };
                            // d dice_c / d p = (2*g*denom - numer) / denom^2
                            let d = (2.0 * gt * denom - numer) / (denom * denom);
                            gin[base + v] = upstream * (-d / fg);
                        }
                    }
                }
                if self.requires(probs) {
                    self.add_grad(probs, &gin);
                }
            }
            Op::ScaledSum { input, coeffs } => {
                let input = *input;
                let upstream = gout[0];
                let gin: Vec<f64> = coeffs.iter().map(|c| upstream * c).collect();
                if self.requires(input) {
                    self.add_grad(input, &gin);
                }
            }
        }
    }
}
