//! Configurable 3-D U-Net: encoder/decoder assembly, forward passes, and the
//! binary checkpoint container.
//!
//! Each resolution step is the block `conv3x3x3 -> ReLU -> conv3x3x3 ->
//! batch-norm -> ReLU`; steps are joined by 2x max-pooling on the way down
//! and learnable stride-2 up-convolutions on the way up, with skip
//! connections concatenated along channels. A 1x1x1 head maps the full-
//! resolution features to per-class logits.

use crate::error::{Error, Result};
use crate::tensor::{BatchNormState, NodeId, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Number of resolution steps (encoder depth).
    pub resolution_steps: usize,
    /// Channel ladder, one entry per step.
    pub channels: Vec<usize>,
    /// Output classes (background + foreground structures).
    pub num_classes: usize,
    pub input_channels: usize,
    /// Seed for the parameter initialization stream.
    pub seed: u64,
}

impl UNetConfig {
    /// Full-size configuration: five steps, 32..512 channels.
    pub fn full(num_classes: usize, seed: u64) -> Self {
        Self {
            resolution_steps: 5,
            channels: vec![32, 64, 128, 256, 512],
            num_classes,
            input_channels: 1,
            seed,
        }
    }

    /// Desk-scale configuration: three steps, 8/16/32 channels.
    pub fn desk(num_classes: usize, seed: u64) -> Self {
        Self {
            resolution_steps: 3,
            channels: vec![8, 16, 32],
            num_classes,
            input_channels: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution_steps == 0 {
            return Err(Error::BadConfig("resolution_steps must be >= 1".into()));
        }
        if self.channels.len() != self.resolution_steps {
            return Err(Error::BadConfig(format!(
                "channel ladder has {} entries for {} steps",
                self.channels.len(),
                self.resolution_steps
            )));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::BadConfig("channel counts must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::BadConfig("need at least 2 classes".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::BadConfig("input_channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Spatial dims must be divisible by 2^(steps-1) so pooling and
    /// up-convolution shapes line up.
    pub fn validate_input_shape(&self, shape: [usize; 3]) -> Result<()> {
        let div = 1usize << (self.resolution_steps - 1);
        if shape.iter().any(|&d| d == 0 || d % div != 0) {
            return Err(Error::BadConfig(format!(
                "input shape {shape:?} not divisible by {div}"
            )));
        }
        Ok(())
    }
}

/// `conv -> ReLU -> conv -> BN -> ReLU` parameters for one step.
#[derive(Debug, Clone)]
struct ConvBlock {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    bn: BatchNormState,
}

struct BlockOutput {
    out: NodeId,
    params: Vec<NodeId>,
}

impl ConvBlock {
    fn init(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> Self {
        Self {
            w1: he_uniform(rng, vec![cout, cin, 3, 3, 3], cin * 27),
            b1: Tensor::zeros(vec![cout]).with_requires_grad(),
            w2: he_uniform(rng, vec![cout, cout, 3, 3, 3], cout * 27),
            b2: Tensor::zeros(vec![cout]).with_requires_grad(),
            bn: BatchNormState::new(cout),
        }
    }

    fn forward_train(&mut self, tape: &mut Tape, input: NodeId) -> Result<BlockOutput> {
        let w1 = tape.leaf(&self.w1);
        let b1 = tape.leaf(&self.b1);
        let w2 = tape.leaf(&self.w2);
        let b2 = tape.leaf(&self.b2);
        let gamma = tape.leaf(&self.bn.gamma);
        let beta = tape.leaf(&self.bn.beta);
        let c1 = tape.conv3d(input, w1, b1)?;
        let r1 = tape.relu(c1);
        let c2 = tape.conv3d(r1, w2, b2)?;
        let n = tape.batchnorm_train(c2, gamma, beta, &mut self.bn)?;
        let out = tape.relu(n);
        Ok(BlockOutput {
            out,
            params: vec![w1, b1, w2, b2, gamma, beta],
        })
    }

    fn forward_infer(&self, tape: &mut Tape, input: NodeId) -> Result<NodeId> {
        let w1 = tape.leaf(&self.w1);
        let b1 = tape.leaf(&self.b1);
        let w2 = tape.leaf(&self.w2);
        let b2 = tape.leaf(&self.b2);
        let gamma = tape.leaf(&self.bn.gamma);
        let beta = tape.leaf(&self.bn.beta);
        let c1 = tape.conv3d(input, w1, b1)?;
        let r1 = tape.relu(c1);
        let c2 = tape.conv3d(r1, w2, b2)?;
        let n = tape.batchnorm_infer(c2, gamma, beta, &self.bn)?;
        Ok(tape.relu(n))
    }

    fn params(&self) -> [&Tensor; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.bn.gamma, &self.bn.beta]
    }

    fn params_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.bn.gamma,
            &mut self.bn.beta,
        ]
    }
}

/// One decoder stage: up-convolution followed by a conv block.
#[derive(Debug, Clone)]
struct DecoderStage {
    up_w: Tensor,
    block: ConvBlock,
}

/// The assembled network. Parameters live here; every forward pass clones
/// them onto a fresh tape as leaves.
#[derive(Debug, Clone)]
pub struct UNetModel {
    pub config: UNetConfig,
    encoder: Vec<ConvBlock>,
    /// Decoder stages ordered deepest-first (stage j handles level
    /// `steps - 2 - j`).
    decoder: Vec<DecoderStage>,
    head_w: Tensor,
    head_b: Tensor,
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data)
        .expect("init shape is valid")
        .with_requires_grad()
}

/// Result of a forward pass: the logits node plus the tape leaves of every
/// trainable parameter, aligned with [`UNetModel::parameters`] order.
pub struct ForwardPass {
    pub logits: NodeId,
    pub param_nodes: Vec<NodeId>,
}

impl UNetModel {
    /// Build and initialize a network (He-uniform weights, zero biases,
    /// unit-gamma batch norm), deterministic per seed.
    pub fn build(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let steps = config.resolution_steps;
        let ladder = &config.channels;

        let mut encoder = Vec::with_capacity(steps);
        let mut cin = config.input_channels;
        for &c in ladder {
            encoder.push(ConvBlock::init(&mut rng, cin, c));
            cin = c;
        }

        let mut decoder = Vec::with_capacity(steps.saturating_sub(1));
        for level in (0..steps.saturating_sub(1)).rev() {
            let c_deep = ladder[level + 1];
            let c = ladder[level];
            // Up-convolution halves channels; concatenation doubles them back.
            let up_w = he_uniform(&mut rng, vec![c_deep, c, 2, 2, 2], c_deep * 8);
            let block = ConvBlock::init(&mut rng, 2 * c, c);
            decoder.push(DecoderStage { up_w, block });
        }

        let c0 = ladder[0];
        let head_w = he_uniform(&mut rng, vec![config.num_classes, c0], c0);
        let head_b = Tensor::zeros(vec![config.num_classes]).with_requires_grad();

        Ok(Self {
            config,
            encoder,
            decoder,
            head_w,
            head_b,
        })
    }

    /// Forward pass producing per-class logits `[b, C, X, Y, Z]`.
    /// Train mode updates batch-norm running statistics.
    pub fn forward_train(&mut self, tape: &mut Tape, batch: NodeId) -> Result<ForwardPass> {
        self.check_batch(tape, batch)?;
        let steps = self.config.resolution_steps;
        let mut param_nodes = Vec::new();
        let mut skips: Vec<NodeId> = Vec::with_capacity(steps - 1);
        let mut cursor = batch;
        for (i, block) in self.encoder.iter_mut().enumerate() {
            let BlockOutput { out, params } = block.forward_train(tape, cursor)?;
            param_nodes.extend(params);
            if i + 1 < steps {
                skips.push(out);
                cursor = tape.maxpool3d(out)?;
            } else {
                cursor = out;
            }
        }

        for (j, stage) in self.decoder.iter_mut().enumerate() {
            let level = steps - 2 - j;
            let up_w = tape.leaf(&stage.up_w);
            let up = tape.transposed_conv3d(cursor, up_w)?;
            let cat = tape.concat_channels(up, skips[level])?;
            param_nodes.push(up_w);
            let BlockOutput { out, params } = stage.block.forward_train(tape, cat)?;
            param_nodes.extend(params);
            cursor = out;
        }

        let head_w = tape.leaf(&self.head_w);
        let head_b = tape.leaf(&self.head_b);
        let logits = tape.pointwise_conv(cursor, head_w, head_b)?;
        param_nodes.push(head_w);
        param_nodes.push(head_b);

        Ok(ForwardPass {
            logits,
            param_nodes,
        })
    }

    /// Inference pass; the model is immutable and shareable across threads.
    pub fn forward_infer(&self, tape: &mut Tape, batch: NodeId) -> Result<NodeId> {
        self.check_batch(tape, batch)?;
        let steps = self.config.resolution_steps;
        let mut skips: Vec<NodeId> = Vec::with_capacity(steps - 1);
        let mut cursor = batch;
        for (i, block) in self.encoder.iter().enumerate() {
            let out = block.forward_infer(tape, cursor)?;
            if i + 1 < steps {
                skips.push(out);
                cursor = tape.maxpool3d(out)?;
            } else {
                cursor = out;
            }
        }
        for (j, stage) in self.decoder.iter().enumerate() {
            let level = steps - 2 - j;
            let up_w = tape.leaf(&stage.up_w);
            let up = tape.transposed_conv3d(cursor, up_w)?;
            let cat = tape.concat_channels(up, skips[level])?;
            cursor = stage.block.forward_infer(tape, cat)?;
        }
        let head_w = tape.leaf(&self.head_w);
        let head_b = tape.leaf(&self.head_b);
        tape.pointwise_conv(cursor, head_w, head_b)
    }

    fn check_batch(&self, tape: &Tape, batch: NodeId) -> Result<()> {
        let [_, cin, x, y, z] = tape.value(batch).dims5()?;
        if cin != self.config.input_channels {
            return Err(Error::ShapeMismatch {
                expected: vec![self.config.input_channels],
                got: vec![cin],
            });
        }
        self.config.validate_input_shape([x, y, z])
    }

    /// Trainable parameters in build order.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for b in &self.encoder {
            out.extend(b.params());
        }
        for s in &self.decoder {
            out.push(&s.up_w);
            out.extend(s.block.params());
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for b in &mut self.encoder {
            out.extend(b.params_mut());
        }
        for s in &mut self.decoder {
            out.push(&mut s.up_w);
            out.extend(s.block.params_mut());
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// All batch-norm layers in build order.
    pub(crate) fn bn_states_mut(&mut self) -> Vec<&mut BatchNormState> {
        let mut out: Vec<&mut BatchNormState> = Vec::new();
        for b in &mut self.encoder {
            out.push(&mut b.bn);
        }
        for s in &mut self.decoder {
            out.push(&mut s.block.bn);
        }
        out
    }

    /// Batch-norm running statistics in build order (mean then variance per
    /// block).
    fn state_buffers(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for b in &self.encoder {
            out.push(&b.bn.running_mean);
            out.push(&b.bn.running_var);
        }
        for s in &self.decoder {
            out.push(&s.block.bn.running_mean);
            out.push(&s.block.bn.running_var);
        }
        out
    }

    fn state_buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        for b in &mut self.encoder {
            out.push(&mut b.bn.running_mean);
            out.push(&mut b.bn.running_var);
        }
        for s in &mut self.decoder {
            out.push(&mut s.block.bn.running_mean);
            out.push(&mut s.block.bn.running_var);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    /// Zero the classifier head (uniform softmax everywhere): used in tests.
    pub fn zero_head(&mut self) {
        self.head_w.data_mut().fill(0.0);
        self.head_b.data_mut().fill(0.0);
    }

    // ---- checkpoint container ----

    const MAGIC: &'static [u8; 8] = b"RSEGUNET";
    const VERSION: u32 = 1;

    /// Serialize to the versioned binary container: magic, version, config,
    /// trainable parameters, then batch-norm running buffers, all
    /// little-endian; floats are raw IEEE-754 bits so round trips are
    /// byte-exact.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&Self::VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.resolution_steps as u32).to_le_bytes());
        out.extend_from_slice(&(self.config.channels.len() as u32).to_le_bytes());
        for &c in &self.config.channels {
            out.extend_from_slice(&(c as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.config.num_classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.config.input_channels as u32).to_le_bytes());
        out.extend_from_slice(&self.config.seed.to_le_bytes());

        let params = self.parameters();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params {
            out.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
            for &d in p.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }

        let buffers = self.state_buffers();
        out.extend_from_slice(&(buffers.len() as u32).to_le_bytes());
        for b in buffers {
            out.extend_from_slice(&(b.len() as u32).to_le_bytes());
            for &v in b.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(8)?;
        if magic != Self::MAGIC {
            return Err(Error::BadCheckpoint("wrong magic".into()));
        }
        let version = r.u32()?;
        if version != Self::VERSION {
            return Err(Error::BadCheckpoint(format!(
                "unsupported version {version}"
            )));
        }
        let resolution_steps = r.u32()? as usize;
        let ladder_len = r.u32()? as usize;
        let mut channels = Vec::with_capacity(ladder_len);
        for _ in 0..ladder_len {
            channels.push(r.u32()? as usize);
        }
        let num_classes = r.u32()? as usize;
        let input_channels = r.u32()? as usize;
        let seed = r.u64()?;
        let config = UNetConfig {
            resolution_steps,
            channels,
            num_classes,
            input_channels,
            seed,
        };
        let mut model = Self::build(config)?;

        let param_count = r.u32()? as usize;
        {
            let mut params = model.parameters_mut();
            if param_count != params.len() {
                return Err(Error::BadCheckpoint(format!(
                    "container holds {param_count} tensors, model expects {}",
                    params.len()
                )));
            }
            for p in params.iter_mut() {
                let rank = r.u32()? as usize;
                let mut dims = Vec::with_capacity(rank);
                for _ in 0..rank {
                    dims.push(r.u32()? as usize);
                }
                if dims != p.shape() {
                    return Err(Error::BadCheckpoint(format!(
                        "tensor shape {dims:?} does not match model shape {:?}",
                        p.shape()
                    )));
                }
                for v in p.data_mut() {
                    *v = r.f64()?;
                }
            }
        }

        let buffer_count = r.u32()? as usize;
        {
            let mut buffers = model.state_buffers_mut();
            if buffer_count != buffers.len() {
                return Err(Error::BadCheckpoint(format!(
                    "container holds {buffer_count} buffers, model expects {}",
                    buffers.len()
                )));
            }
            for b in buffers.iter_mut() {
                let len = r.u32()? as usize;
                if len != b.len() {
                    return Err(Error::BadCheckpoint("buffer length mismatch".into()));
                }
                for v in b.iter_mut() {
                    *v = r.f64()?;
                }
            }
        }
        if !r.at_end() {
            return Err(Error::BadCheckpoint("trailing bytes".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::BadCheckpoint("container truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("length checked")))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("length checked")))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
