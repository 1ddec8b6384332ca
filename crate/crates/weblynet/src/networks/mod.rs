//! The two network families and their declarative specs.
//!
//! The segment network (`N1` family) is a deep CNN over a recording's
//! segment-embedding matrix. Each 1-second segment is processed
//! independently: segments ride the batch axis as `[N, 1, 1, embed_dim]`
//! images, four conv blocks halve the embedding axis down to
//! `embed_dim/16`, a `1×k` layer collapses it, and a sigmoid output layer
//! produces per-segment class posteriors which the pooling layer averages
//! into the recording-level posterior. Because segments never mix,
//! permuting them permutes the segment outputs and leaves the pooled
//! output unchanged.
//!
//! The transfer network (`N2` family) is a three-hidden-layer MLP with
//! dropout over a fixed-length feature vector obtained from a pretrained
//! segment network's penultimate (F2) layer.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};

use crate::seeding;
use crate::tensor::{BnObserved, Tape, Tensor, TensorError, Var};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

/// Exact rational width multiplier applied to filter/hidden counts so
/// desk-scale runs stay cheap. The kernel geometry is never scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scale {
    pub num: u32,
    pub den: u32,
}

impl Scale {
    pub const ONE: Scale = Scale { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Scale {
        assert!(num > 0 && den > 0, "scale must be positive");
        Scale { num, den }
    }

    pub fn apply(&self, n: usize) -> usize {
        ((n * self.num as usize) / self.den as usize).max(1)
    }
}

impl Default for Scale {
    fn default() -> Self {
        Scale::ONE
    }
}

/// Forward-pass mode. Eval is deterministic: no dropout sampling, batch
/// normalization uses running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture of the segment CNN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct N1Spec {
    /// Filters for both conv layers of blocks B1..B4.
    pub block_filters: [usize; 4],
    pub f1_filters: usize,
    pub f2_filters: usize,
    /// Width of the F1 kernel; must equal `embed_dim / 16`.
    pub f1_kernel_w: usize,
    pub num_classes: usize,
    /// Width of one segment embedding.
    pub embed_dim: usize,
    pub width_scale: Scale,
}

impl N1Spec {
    pub fn new(num_classes: usize) -> N1Spec {
        N1Spec {
            block_filters: [64, 128, 256, 256],
            f1_filters: 1024,
            f2_filters: 1024,
            f1_kernel_w: 8,
            num_classes,
            embed_dim: 128,
            width_scale: Scale::ONE,
        }
    }

    pub fn with_width_scale(num_classes: usize, scale: Scale) -> N1Spec {
        N1Spec {
            width_scale: scale,
            ..N1Spec::new(num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(NetworkError::InvalidSpec("num_classes must be positive".into()));
        }
        if self.embed_dim == 0 || self.embed_dim % 16 != 0 {
            return Err(NetworkError::InvalidSpec(format!(
                "embed_dim {} must be a positive multiple of 16 (four width-halving pools)",
                self.embed_dim
            )));
        }
        if self.f1_kernel_w != self.embed_dim / 16 {
            return Err(NetworkError::InvalidSpec(format!(
                "f1_kernel_w {} must equal embed_dim/16 = {} so F1 collapses the embedding axis",
                self.f1_kernel_w,
                self.embed_dim / 16
            )));
        }
        if self.block_filters.iter().any(|&f| f == 0) || self.f1_filters == 0 || self.f2_filters == 0
        {
            return Err(NetworkError::InvalidSpec("filter counts must be positive".into()));
        }
        Ok(())
    }

    pub fn scaled_block_filters(&self) -> [usize; 4] {
        let s = self.width_scale;
        [
            s.apply(self.block_filters[0]),
            s.apply(self.block_filters[1]),
            s.apply(self.block_filters[2]),
            s.apply(self.block_filters[3]),
        ]
    }

    pub fn scaled_f1(&self) -> usize {
        self.width_scale.apply(self.f1_filters)
    }

    /// Width of the transfer representation this network produces.
    pub fn scaled_f2(&self) -> usize {
        self.width_scale.apply(self.f2_filters)
    }
}

/// Architecture of the transfer-feature MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct N2Spec {
    pub hidden: [usize; 3],
    pub dropout_p: f64,
    pub num_classes: usize,
    pub input_dim: usize,
    pub width_scale: Scale,
}

impl N2Spec {
    pub fn new(num_classes: usize, input_dim: usize) -> N2Spec {
        N2Spec {
            hidden: [2048, 1024, 1024],
            dropout_p: 0.4,
            num_classes,
            input_dim,
            width_scale: Scale::ONE,
        }
    }

    pub fn with_width_scale(num_classes: usize, input_dim: usize, scale: Scale) -> N2Spec {
        N2Spec {
            width_scale: scale,
            ..N2Spec::new(num_classes, input_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.input_dim == 0 {
            return Err(NetworkError::InvalidSpec(
                "num_classes and input_dim must be positive".into(),
            ));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(NetworkError::InvalidSpec("hidden sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(NetworkError::InvalidSpec(format!(
                "dropout_p {} must lie in [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }

    pub fn scaled_hidden(&self) -> [usize; 3] {
        let s = self.width_scale;
        [
            s.apply(self.hidden[0]),
            s.apply(self.hidden[1]),
            s.apply(self.hidden[2]),
        ]
    }
}

/// Tagged spec for checkpoints and configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family")]
pub enum NetworkSpec {
    N1(N1Spec),
    N2(N2Spec),
}

// ---- layer building blocks ---------------------------------------------

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

fn kaiming_uniform(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

#[derive(Debug, Clone)]
struct Conv2d {
    weight: Tensor, // [co, ci, kh, kw]
    bias: Option<Tensor>,
    stride: (usize, usize),
    pad: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    fn init(
        rng: &mut ChaCha8Rng,
        co: usize,
        ci: usize,
        kh: usize,
        kw: usize,
        stride: (usize, usize),
        pad: (usize, usize),
        with_bias: bool,
    ) -> Conv2d {
        let weight = Tensor::new(
            vec![co, ci, kh, kw],
            kaiming_uniform(rng, ci * kh * kw, co * ci * kh * kw),
        );
        Conv2d {
            weight,
            bias: with_bias.then(|| Tensor::zeros(vec![co])),
            stride,
            pad,
        }
    }
}

#[derive(Debug, Clone)]
struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

impl BatchNorm2d {
    fn init(channels: usize) -> BatchNorm2d {
        BatchNorm2d {
            gamma: Tensor::ones(vec![channels]),
            beta: Tensor::zeros(vec![channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    fn fold_observed(&mut self, obs: &BnObserved) {
        for (r, &b) in self.running_mean.iter_mut().zip(&obs.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&obs.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

/// Conv -> batch norm -> ReLU, the unit every N1 layer except the output
/// head is made of. The conv carries no bias; the normalization shift
/// plays that role.
#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn init(
        rng: &mut ChaCha8Rng,
        co: usize,
        ci: usize,
        kh: usize,
        kw: usize,
        pad: (usize, usize),
    ) -> ConvBn {
        ConvBn {
            conv: Conv2d::init(rng, co, ci, kh, kw, (1, 1), pad, false),
            bn: BatchNorm2d::init(co),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct BoundConvBn {
    w: Var,
    gamma: Var,
    beta: Var,
}

#[derive(Debug, Clone)]
struct Dense {
    weight: Tensor, // [out, in]
    bias: Tensor,   // [out]
}

impl Dense {
    fn init(rng: &mut ChaCha8Rng, out: usize, input: usize) -> Dense {
        Dense {
            weight: Tensor::new(vec![out, input], kaiming_uniform(rng, input, out * input)),
            bias: Tensor::zeros(vec![out]),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct BoundDense {
    w: Var,
    b: Var,
}

// ---- N1: segment CNN -----------------------------------------------------

#[derive(Debug, Clone)]
pub struct N1Network {
    pub spec: N1Spec,
    blocks: Vec<[ConvBn; 2]>,
    f1: ConvBn,
    f2: ConvBn,
    head: Conv2d,
    init_seed: u64,
}

/// Tape handles for one binding of the network's parameters.
pub struct N1Bound {
    blocks: Vec<[BoundConvBn; 2]>,
    f1: BoundConvBn,
    f2: BoundConvBn,
    head_w: Var,
    head_b: Var,
}

/// Results of one N1 forward pass.
pub struct N1Forward {
    /// Per-segment class posteriors, `[C, N]`.
    pub segment_out: Var,
    /// Pooled recording-level posterior, `[C]`: the arithmetic mean over
    /// segments of each class row.
    pub recording_out: Var,
    /// Mean post-ReLU F2 activation over segments, `[f2]`.
    pub f2_mean: Var,
    /// Batch statistics observed by each normalization layer, in layer
    /// order; empty in eval mode.
    pub bn_observed: Vec<BnObserved>,
}

/// Results of a minibatch N1 forward pass.
pub struct N1BatchForward {
    /// Pooled posterior per recording, `[B, C]`.
    pub recording_out: Var,
    /// Mean F2 activation per recording, `[B, f2]`.
    pub f2_mean: Var,
    pub bn_observed: Vec<BnObserved>,
}

impl N1Network {
    pub fn init(spec: N1Spec, seed: u64) -> Result<N1Network> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let filters = spec.scaled_block_filters();
        let mut blocks = Vec::with_capacity(4);
        let mut c_in = 1;
        for &c_out in &filters {
            let a = ConvBn::init(&mut rng, c_out, c_in, 3, 3, (1, 1));
            let b = ConvBn::init(&mut rng, c_out, c_out, 3, 3, (1, 1));
            blocks.push([a, b]);
            c_in = c_out;
        }
        let f1 = ConvBn::init(&mut rng, spec.scaled_f1(), c_in, 1, spec.f1_kernel_w, (0, 0));
        let f2 = ConvBn::init(&mut rng, spec.scaled_f2(), spec.scaled_f1(), 1, 1, (0, 0));
        let head = Conv2d::init(
            &mut rng,
            spec.num_classes,
            spec.scaled_f2(),
            1,
            1,
            (1, 1),
            (0, 0),
            true,
        );
        Ok(N1Network {
            spec,
            blocks,
            f1,
            f2,
            head,
            init_seed: seed,
        })
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    /// Pushes every parameter onto the tape and returns the handles.
    pub fn bind(&self, tape: &mut Tape) -> N1Bound {
        let bind_cb = |tape: &mut Tape, cb: &ConvBn| BoundConvBn {
            w: tape.leaf(&cb.conv.weight),
            gamma: tape.leaf(&cb.bn.gamma),
            beta: tape.leaf(&cb.bn.beta),
        };
        N1Bound {
            blocks: self
                .blocks
                .iter()
                .map(|[a, b]| [bind_cb(tape, a), bind_cb(tape, b)])
                .collect(),
            f1: bind_cb(tape, &self.f1),
            f2: bind_cb(tape, &self.f2),
            head_w: tape.leaf(&self.head.weight),
            head_b: tape.leaf(self.head.bias.as_ref().expect("head has bias")),
        }
    }

    fn conv_bn_relu(
        &self,
        tape: &mut Tape,
        layer: &ConvBn,
        bound: &BoundConvBn,
        x: Var,
        mode: Mode,
        observed: &mut Vec<BnObserved>,
    ) -> Result<Var> {
        let c = tape.conv2d(x, bound.w, layer.conv.stride, layer.conv.pad)?;
        let normed = match mode {
            Mode::Train => {
                let (v, obs) = tape.batch_norm_train(c, bound.gamma, bound.beta, BN_EPS)?;
                observed.push(obs);
                v
            }
            Mode::Eval => tape.batch_norm_eval(
                c,
                bound.gamma,
                bound.beta,
                &layer.bn.running_mean,
                &layer.bn.running_var,
                BN_EPS,
            )?,
        };
        Ok(tape.relu(normed))
    }

    fn check_segments(&self, shape: &[usize]) -> Result<usize> {
        if shape.len() != 2 || shape[1] != self.spec.embed_dim {
            return Err(NetworkError::Tensor(TensorError::ShapeMismatch {
                op: "n1_forward",
                lhs: shape.to_vec(),
                rhs: vec![shape.first().copied().unwrap_or(0), self.spec.embed_dim],
            }));
        }
        Ok(shape[0])
    }

    /// Blocks B1..B4 plus F1 and F2 over a stack of segments (one or
    /// many recordings — segments never mix, so stacking is free);
    /// returns post-ReLU F2 activations of shape `[M, f2, 1, 1]`.
    fn backbone(
        &self,
        tape: &mut Tape,
        bound: &N1Bound,
        segments: Var,
        mode: Mode,
        observed: &mut Vec<BnObserved>,
    ) -> Result<Var> {
        let m = tape.shape(segments)[0];
        let mut h = tape.reshape(segments, vec![m, 1, 1, self.spec.embed_dim])?;
        for ([a, b], bnd) in self.blocks.iter().zip(&bound.blocks) {
            h = self.conv_bn_relu(tape, a, &bnd[0], h, mode, observed)?;
            h = self.conv_bn_relu(tape, b, &bnd[1], h, mode, observed)?;
            h = tape.maxpool2d(h, (1, 2), (1, 2))?;
        }
        h = self.conv_bn_relu(tape, &self.f1, &bound.f1, h, mode, observed)?;
        self.conv_bn_relu(tape, &self.f2, &bound.f2, h, mode, observed)
    }

    /// Segment-level sigmoid outputs `[M, C]` plus F2 activations
    /// `[M, f2]` for a segment stack.
    fn head_outputs(
        &self,
        tape: &mut Tape,
        bound: &N1Bound,
        segments: Var,
        mode: Mode,
        observed: &mut Vec<BnObserved>,
    ) -> Result<(Var, Var)> {
        let f2_act = self.backbone(tape, bound, segments, mode, observed)?;
        let m = tape.shape(f2_act)[0];
        let f2_flat = tape.reshape(f2_act, vec![m, self.spec.scaled_f2()])?;
        let logits = tape.conv2d(f2_act, bound.head_w, self.head.stride, self.head.pad)?;
        let logits = tape.channel_bias(logits, bound.head_b)?;
        let seg = tape.sigmoid(logits);
        let seg_flat = tape.reshape(seg, vec![m, self.spec.num_classes])?;
        Ok((seg_flat, f2_flat))
    }

    /// Full forward pass over one recording's `[N, embed_dim]` segment
    /// matrix.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &N1Bound,
        x: &Tensor,
        mode: Mode,
    ) -> Result<N1Forward> {
        self.check_segments(x.shape())?;
        let mut observed = Vec::new();
        let x0 = tape.leaf(x);
        let (seg_flat, f2_flat) = self.head_outputs(tape, bound, x0, mode, &mut observed)?;
        let f2_mean = tape.col_mean(f2_flat)?;
        let recording_out = tape.col_mean(seg_flat)?;
        let segment_out = tape.transpose(seg_flat)?;
        Ok(N1Forward {
            segment_out,
            recording_out,
            f2_mean,
            bn_observed: observed,
        })
    }

    /// Forward pass over a whole minibatch of recordings at once: all
    /// segments run as one stack, so train-mode batch normalization sees
    /// statistics of the full minibatch rather than one recording.
    /// Returns per-recording pooled posteriors `[B, C]`.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        bound: &N1Bound,
        recordings: &[&Tensor],
        mode: Mode,
    ) -> Result<N1BatchForward> {
        let mut lengths = Vec::with_capacity(recordings.len());
        let mut total = 0usize;
        for x in recordings {
            let n = self.check_segments(x.shape())?;
            lengths.push(n);
            total += n;
        }
        let d = self.spec.embed_dim;
        let mut stacked = Vec::with_capacity(total * d);
        for x in recordings {
            stacked.extend_from_slice(x.data());
        }
        let x0 = tape.leaf_owned(Tensor::new(vec![total, d], stacked));
        let mut observed = Vec::new();
        let (seg_flat, f2_flat) = self.head_outputs(tape, bound, x0, mode, &mut observed)?;
        let recording_out = tape.group_col_mean(seg_flat, &lengths)?;
        let f2_mean = tape.group_col_mean(f2_flat, &lengths)?;
        Ok(N1BatchForward {
            recording_out,
            f2_mean,
            bn_observed: observed,
        })
    }

    /// Transfer representation: post-ReLU F2 activations averaged over
    /// segments, `[f2]`.
    pub fn extract_f2(&self, tape: &mut Tape, bound: &N1Bound, x: &Tensor, mode: Mode) -> Result<Var> {
        self.check_segments(x.shape())?;
        let mut observed = Vec::new();
        let x0 = tape.leaf(x);
        let f2_act = self.backbone(tape, bound, x0, mode, &mut observed)?;
        let n = tape.shape(f2_act)[0];
        let f2_flat = tape.reshape(f2_act, vec![n, self.spec.scaled_f2()])?;
        Ok(tape.col_mean(f2_flat)?)
    }

    /// Convenience wrapper: eval-mode F2 extraction into a plain tensor.
    pub fn extract_f2_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let v = self.extract_f2(&mut tape, &bound, x, Mode::Eval)?;
        Ok(tape.to_tensor(v))
    }

    /// Folds batch statistics from a train-mode forward into the running
    /// statistics, in the same layer order `forward` produced them.
    pub fn apply_bn_updates(&mut self, observed: &[BnObserved]) {
        let mut it = observed.iter();
        for [a, b] in &mut self.blocks {
            if let Some(o) = it.next() {
                a.bn.fold_observed(o);
            }
            if let Some(o) = it.next() {
                b.bn.fold_observed(o);
            }
        }
        if let Some(o) = it.next() {
            self.f1.bn.fold_observed(o);
        }
        if let Some(o) = it.next() {
            self.f2.bn.fold_observed(o);
        }
    }

    pub fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, [a, b]) in self.blocks.iter().enumerate() {
            let i = i + 1;
            f(&format!("b{i}.conv1.weight"), &a.conv.weight);
            f(&format!("b{i}.bn1.gamma"), &a.bn.gamma);
            f(&format!("b{i}.bn1.beta"), &a.bn.beta);
            f(&format!("b{i}.conv2.weight"), &b.conv.weight);
            f(&format!("b{i}.bn2.gamma"), &b.bn.gamma);
            f(&format!("b{i}.bn2.beta"), &b.bn.beta);
        }
        f("f1.conv.weight", &self.f1.conv.weight);
        f("f1.bn.gamma", &self.f1.bn.gamma);
        f("f1.bn.beta", &self.f1.bn.beta);
        f("f2.conv.weight", &self.f2.conv.weight);
        f("f2.bn.gamma", &self.f2.bn.gamma);
        f("f2.bn.beta", &self.f2.bn.beta);
        f("head.weight", &self.head.weight);
        f("head.bias", self.head.bias.as_ref().expect("head has bias"));
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, [a, b]) in self.blocks.iter_mut().enumerate() {
            let i = i + 1;
            f(&format!("b{i}.conv1.weight"), &mut a.conv.weight);
            f(&format!("b{i}.bn1.gamma"), &mut a.bn.gamma);
            f(&format!("b{i}.bn1.beta"), &mut a.bn.beta);
            f(&format!("b{i}.conv2.weight"), &mut b.conv.weight);
            f(&format!("b{i}.bn2.gamma"), &mut b.bn.gamma);
            f(&format!("b{i}.bn2.beta"), &mut b.bn.beta);
        }
        f("f1.conv.weight", &mut self.f1.conv.weight);
        f("f1.bn.gamma", &mut self.f1.bn.gamma);
        f("f1.bn.beta", &mut self.f1.bn.beta);
        f("f2.conv.weight", &mut self.f2.conv.weight);
        f("f2.bn.gamma", &mut self.f2.bn.gamma);
        f("f2.bn.beta", &mut self.f2.bn.beta);
        f("head.weight", &mut self.head.weight);
        f("head.bias", self.head.bias.as_mut().expect("head has bias"));
    }

    pub fn for_each_buffer(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, [a, b]) in self.blocks.iter().enumerate() {
            let i = i + 1;
            f(&format!("b{i}.bn1.running_mean"), &a.bn.running_mean);
            f(&format!("b{i}.bn1.running_var"), &a.bn.running_var);
            f(&format!("b{i}.bn2.running_mean"), &b.bn.running_mean);
            f(&format!("b{i}.bn2.running_var"), &b.bn.running_var);
        }
        f("f1.bn.running_mean", &self.f1.bn.running_mean);
        f("f1.bn.running_var", &self.f1.bn.running_var);
        f("f2.bn.running_mean", &self.f2.bn.running_mean);
        f("f2.bn.running_var", &self.f2.bn.running_var);
    }

    pub fn for_each_buffer_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        for (i, [a, b]) in self.blocks.iter_mut().enumerate() {
            let i = i + 1;
            f(&format!("b{i}.bn1.running_mean"), &mut a.bn.running_mean);
            f(&format!("b{i}.bn1.running_var"), &mut a.bn.running_var);
            f(&format!("b{i}.bn2.running_mean"), &mut b.bn.running_mean);
            f(&format!("b{i}.bn2.running_var"), &mut b.bn.running_var);
        }
        f("f1.bn.running_mean", &mut self.f1.bn.running_mean);
        f("f1.bn.running_var", &mut self.f1.bn.running_var);
        f("f2.bn.running_mean", &mut self.f2.bn.running_mean);
        f("f2.bn.running_var", &mut self.f2.bn.running_var);
    }

    /// Collects parameter gradients from a tape after `backward`, in
    /// parameter order. Missing gradients come back as zeros.
    pub fn collect_grads(&self, tape: &Tape, bound: &N1Bound) -> Vec<Vec<f64>> {
        collect_grads_for(tape, &bound.param_vars())
    }
}

fn collect_grads_for(tape: &Tape, vars: &[Var]) -> Vec<Vec<f64>> {
    vars.iter()
        .map(|&v| match tape.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.data(v).len()],
        })
        .collect()
}

impl N1Bound {
    /// Tape handles of the parameters, in parameter order.
    pub fn param_vars(&self) -> Vec<Var> {
        let mut vars = Vec::new();
        for bnd in &self.blocks {
            for cb in bnd {
                vars.push(cb.w);
                vars.push(cb.gamma);
                vars.push(cb.beta);
            }
        }
        for cb in [&self.f1, &self.f2] {
            vars.push(cb.w);
            vars.push(cb.gamma);
            vars.push(cb.beta);
        }
        vars.push(self.head_w);
        vars.push(self.head_b);
        vars
    }
}

// ---- N2: transfer MLP ------------------------------------------------------

#[derive(Debug, Clone)]
pub struct N2Network {
    pub spec: N2Spec,
    layers: Vec<Dense>, // three hidden + output
    init_seed: u64,
    dropout_salt: u64,
}

pub struct N2Bound {
    layers: Vec<BoundDense>,
}

impl N2Network {
    pub fn init(spec: N2Spec, seed: u64) -> Result<N2Network> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = spec.scaled_hidden();
        let dims = [
            (hidden[0], spec.input_dim),
            (hidden[1], hidden[0]),
            (hidden[2], hidden[1]),
            (spec.num_classes, hidden[2]),
        ];
        let layers = dims
            .iter()
            .map(|&(out, input)| Dense::init(&mut rng, out, input))
            .collect();
        Ok(N2Network {
            spec,
            layers,
            init_seed: seed,
            dropout_salt: seeding::derive(seed, &[TAG_DROPOUT_SALT]),
        })
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    /// Stable per-network salt for dropout mask derivation; survives
    /// checkpointing because it is derived from the init seed.
    pub fn dropout_salt(&self) -> u64 {
        self.dropout_salt
    }

    pub fn bind(&self, tape: &mut Tape) -> N2Bound {
        N2Bound {
            layers: self
                .layers
                .iter()
                .map(|l| BoundDense {
                    w: tape.leaf(&l.weight),
                    b: tape.leaf(&l.bias),
                })
                .collect(),
        }
    }

    /// Forward pass over a `[input_dim]` feature vector; output `[C]`
    /// posteriors in (0,1). Dropout (after hidden layers 1 and 2 only) is
    /// sampled from `rng` in train mode and absent in eval mode.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &N2Bound,
        x2: &Tensor,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if x2.shape() != [self.spec.input_dim] {
            return Err(NetworkError::Tensor(TensorError::ShapeMismatch {
                op: "n2_forward",
                lhs: x2.shape().to_vec(),
                rhs: vec![self.spec.input_dim],
            }));
        }
        let p = self.spec.dropout_p;
        let x0 = tape.leaf(x2);
        let mut h = tape.reshape(x0, vec![self.spec.input_dim, 1])?;
        for (i, bnd) in bound.layers.iter().enumerate() {
            let lin = tape.matmul(bnd.w, h)?;
            let out_dim = tape.shape(lin)[0];
            let b_col = tape.reshape(bnd.b, vec![out_dim, 1])?;
            h = tape.add(lin, b_col)?;
            let is_output = i == bound.layers.len() - 1;
            if is_output {
                h = tape.sigmoid(h);
            } else {
                h = tape.relu(h);
                if i < 2 && mode == Mode::Train && p > 0.0 {
                    let rng = rng
                        .as_deref_mut()
                        .expect("train-mode forward with dropout needs an rng");
                    let keep = 1.0 - p;
                    let mask: Vec<f64> = (0..out_dim)
                        .map(|_| {
                            if rng.random::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    let mask_var = tape.leaf_owned(Tensor::new(vec![out_dim, 1], mask));
                    h = tape.mul(h, mask_var)?;
                }
            }
        }
        let c = self.spec.num_classes;
        Ok(tape.reshape(h, vec![c])?)
    }

    pub fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("fc{}.weight", i + 1), &l.weight);
            f(&format!("fc{}.bias", i + 1), &l.bias);
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("fc{}.weight", i + 1), &mut l.weight);
            f(&format!("fc{}.bias", i + 1), &mut l.bias);
        }
    }

    pub fn collect_grads(&self, tape: &Tape, bound: &N2Bound) -> Vec<Vec<f64>> {
        collect_grads_for(tape, &bound.param_vars())
    }
}

impl N2Bound {
    pub fn param_vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }
}

impl AnyBound {
    pub fn param_vars(&self) -> Vec<Var> {
        match self {
            AnyBound::N1(b) => b.param_vars(),
            AnyBound::N2(b) => b.param_vars(),
        }
    }
}

const TAG_DROPOUT_SALT: u64 = 0x5EED_D80;

// ---- unified wrapper --------------------------------------------------------

/// Which view of a recording a network consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetKind {
    /// Segment CNN over view 1 (`[N, embed_dim]`).
    N1,
    /// MLP over view 2 (`[input_dim]`).
    N2,
}

/// Borrowed views of one recording, as handed to forward passes.
#[derive(Debug, Clone, Copy)]
pub struct InputViews<'a> {
    pub view1: &'a Tensor,
    pub view2: Option<&'a Tensor>,
}

#[derive(Debug, Clone)]
pub enum AnyNetwork {
    N1(N1Network),
    N2(N2Network),
}

pub enum AnyBound {
    N1(N1Bound),
    N2(N2Bound),
}

impl AnyNetwork {
    pub fn kind(&self) -> NetKind {
        match self {
            AnyNetwork::N1(_) => NetKind::N1,
            AnyNetwork::N2(_) => NetKind::N2,
        }
    }

    pub fn spec(&self) -> NetworkSpec {
        match self {
            AnyNetwork::N1(n) => NetworkSpec::N1(n.spec.clone()),
            AnyNetwork::N2(n) => NetworkSpec::N2(n.spec.clone()),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            AnyNetwork::N1(n) => n.spec.num_classes,
            AnyNetwork::N2(n) => n.spec.num_classes,
        }
    }

    pub fn init_seed(&self) -> u64 {
        match self {
            AnyNetwork::N1(n) => n.init_seed(),
            AnyNetwork::N2(n) => n.init_seed(),
        }
    }

    pub fn init_from_spec(spec: NetworkSpec, seed: u64) -> Result<AnyNetwork> {
        Ok(match spec {
            NetworkSpec::N1(s) => AnyNetwork::N1(N1Network::init(s, seed)?),
            NetworkSpec::N2(s) => AnyNetwork::N2(N2Network::init(s, seed)?),
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> AnyBound {
        match self {
            AnyNetwork::N1(n) => AnyBound::N1(n.bind(tape)),
            AnyNetwork::N2(n) => AnyBound::N2(n.bind(tape)),
        }
    }

    fn view2_of<'a>(&self, views: &InputViews<'a>) -> Result<&'a Tensor> {
        views.view2.ok_or_else(|| {
            NetworkError::InvalidSpec("network consumes view 2 but the recording has none".into())
        })
    }

    /// Recording-level posterior for one recording; train mode also
    /// reports observed batch statistics (empty for N2).
    pub fn forward_recording(
        &self,
        tape: &mut Tape,
        bound: &AnyBound,
        views: InputViews<'_>,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Vec<BnObserved>)> {
        match (self, bound) {
            (AnyNetwork::N1(n), AnyBound::N1(b)) => {
                let out = n.forward(tape, b, views.view1, mode)?;
                Ok((out.recording_out, out.bn_observed))
            }
            (AnyNetwork::N2(n), AnyBound::N2(b)) => {
                let x2 = self.view2_of(&views)?;
                let out = n.forward(tape, b, x2, mode, rng)?;
                Ok((out, Vec::new()))
            }
            _ => unreachable!("bound does not match network family"),
        }
    }

    /// Recording-level posteriors for a whole minibatch, one `[C]`
    /// variable per recording. The segment CNN runs every segment of the
    /// batch as one stack (so its train-mode normalization uses batch
    /// statistics); the MLP runs per recording, drawing each recording's
    /// dropout generator from `mask_rng(batch position)`.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        bound: &AnyBound,
        views: &[InputViews<'_>],
        mode: Mode,
        mask_rng: &mut dyn FnMut(usize) -> ChaCha8Rng,
    ) -> Result<(Vec<Var>, Vec<BnObserved>)> {
        match (self, bound) {
            (AnyNetwork::N1(n), AnyBound::N1(b)) => {
                let xs: Vec<&Tensor> = views.iter().map(|v| v.view1).collect();
                let out = n.forward_batch(tape, b, &xs, mode)?;
                let per_rec = (0..views.len())
                    .map(|i| tape.slice_row(out.recording_out, i))
                    .collect::<crate::tensor::Result<Vec<Var>>>()?;
                Ok((per_rec, out.bn_observed))
            }
            (AnyNetwork::N2(n), AnyBound::N2(b)) => {
                let mut per_rec = Vec::with_capacity(views.len());
                for (i, v) in views.iter().enumerate() {
                    let x2 = self.view2_of(v)?;
                    let mut rng = mask_rng(i);
                    per_rec.push(n.forward(tape, b, x2, mode, Some(&mut rng))?);
                }
                Ok((per_rec, Vec::new()))
            }
            _ => unreachable!("bound does not match network family"),
        }
    }

    pub fn apply_bn_updates(&mut self, observed: &[BnObserved]) {
        if let AnyNetwork::N1(n) = self {
            n.apply_bn_updates(observed);
        }
    }

    pub fn collect_grads(&self, tape: &Tape, bound: &AnyBound) -> Vec<Vec<f64>> {
        match (self, bound) {
            (AnyNetwork::N1(n), AnyBound::N1(b)) => n.collect_grads(tape, b),
            (AnyNetwork::N2(n), AnyBound::N2(b)) => n.collect_grads(tape, b),
            _ => unreachable!("bound does not match network family"),
        }
    }

    pub fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            AnyNetwork::N1(n) => n.for_each_param(f),
            AnyNetwork::N2(n) => n.for_each_param(f),
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            AnyNetwork::N1(n) => n.for_each_param_mut(f),
            AnyNetwork::N2(n) => n.for_each_param_mut(f),
        }
    }

    pub fn for_each_buffer(&self, f: &mut dyn FnMut(&str, &[f64])) {
        if let AnyNetwork::N1(n) = self {
            n.for_each_buffer(f);
        }
    }

    pub fn for_each_buffer_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        if let AnyNetwork::N1(n) = self {
            n.for_each_buffer_mut(f);
        }
    }

    /// Dropout salt used when deriving per-recording mask seeds; zero for
    /// networks without dropout.
    pub fn dropout_salt(&self) -> u64 {
        match self {
            AnyNetwork::N1(_) => 0,
            AnyNetwork::N2(n) => n.dropout_salt(),
        }
    }

    /// Total parameter count.
    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, t| n += t.len());
        n
    }
}
