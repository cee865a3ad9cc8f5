//! A small convolutional acoustic model with hand-derived backpropagation.
//!
//! Layout: a strided 1-D convolution over feature frames ("same" zero
//! padding, output frame `j` centered on input frame `j * stride`), ReLU and
//! dropout, then `num_blocks` residual feedforward blocks
//! `h + W2 · dropout(relu(W1 · h + b1)) + b2`, then a projection to
//! `vocab_size + 1` logits and a log-softmax. The blank is the last column.

use std::io::{Read, Write};

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::{BinReader, BinWriter, FormatError};
use crate::ctc::{log_softmax_rows, LogPosteriors};

const MODEL_MAGIC: &[u8; 8] = b"SLIPMODL";
const MODEL_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input has {frames} frames but the convolution needs at least {kernel}")]
    InputTooShort { frames: usize, kernel: usize },
    #[error("input has {found} features, model expects {expected}")]
    FeatureDim { expected: usize, found: usize },
    #[error("dropout rate {0} is outside [0, 1)")]
    DropoutRange(f64),
    #[error("stale tape: recorded at parameter version {tape}, model is at {model}")]
    StaleTape { tape: u64, model: u64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    #[serde(default = "default_kernel")]
    pub conv_kernel: usize,
    #[serde(default = "default_stride")]
    pub conv_stride: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

fn default_kernel() -> usize {
    7
}

fn default_stride() -> usize {
    3
}

impl ModelConfig {
    /// The small conv + residual model the desk experiments use.
    pub fn desk(feature_dim: usize, vocab_size: usize) -> Self {
        Self {
            feature_dim,
            conv_kernel: 3,
            conv_stride: 2,
            hidden_dim: 32,
            num_blocks: 2,
            vocab_size,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad("conv_kernel must be odd");
        }
        if self.conv_stride == 0 {
            return bad("conv_stride must be at least 1");
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be at least 1");
        }
        if self.num_blocks == 0 {
            return bad("num_blocks must be at least 1");
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::DropoutRange(self.dropout));
        }
        Ok(())
    }

    /// Output frames for `frames` inputs: `ceil(frames / stride)`.
    pub fn output_frames(&self, frames: usize) -> usize {
        frames.div_ceil(self.conv_stride)
    }

    /// Shapes of every parameter tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let h = self.hidden_dim;
        let out = self.vocab_size + 1;
        let mut shapes = vec![
            ("conv.weight".to_string(), (self.conv_kernel * self.feature_dim, h)),
            ("conv.bias".to_string(), (1, h)),
        ];
        for b in 0..self.num_blocks {
            shapes.push((format!("block{b}.w1"), (h, h)));
            shapes.push((format!("block{b}.b1"), (1, h)));
            shapes.push((format!("block{b}.w2"), (h, h)));
            shapes.push((format!("block{b}.b2"), (1, h)));
        }
        shapes.push(("out.weight".to_string(), (h, out)));
        shapes.push(("out.bias".to_string(), (1, out)));
        shapes
    }
}

/// A list of tensors laid out as [`ModelConfig::param_shapes`]. Used for
/// parameters, gradients, optimizer accumulators and EMA shadows alike.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tensors: Vec<Array2<f64>>,
}

pub type Gradients = Params;

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            tensors: cfg.param_shapes().into_iter().map(|(_, s)| Array2::zeros(s)).collect(),
        }
    }

    pub fn zeros_like(other: &Params) -> Self {
        Self {
            tensors: other.tensors.iter().map(|t| Array2::zeros(t.dim())).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn same_shapes(&self, other: &Params) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.dim() == b.dim())
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.tensors.iter().flat_map(|t| t.iter())
    }

    pub(crate) fn write<W: Write>(&self, w: &mut BinWriter<W>, names: &[String]) -> std::io::Result<()> {
        w.usize(self.tensors.len())?;
        for (name, t) in names.iter().zip(&self.tensors) {
            w.named_matrix(name, t)?;
        }
        Ok(())
    }

    pub(crate) fn read<R: Read>(r: &mut BinReader<R>, cfg: &ModelConfig) -> Result<Self, FormatError> {
        let shapes = cfg.param_shapes();
        let n = r.usize()?;
        if n != shapes.len() {
            return Err(FormatError::Corrupt(format!("expected {} tensors, found {n}", shapes.len())));
        }
        let mut tensors = Vec::with_capacity(n);
        for (name, shape) in shapes {
            let t = r.named_matrix(&name)?;
            if t.dim() != shape {
                return Err(FormatError::Corrupt(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.dim()
                )));
            }
            tensors.push(t);
        }
        Ok(Self { tensors })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    params: Params,
    dropout: f64,
    update_count: u64,
    /// Bumped on every parameter or regularization change; tapes remember
    /// the version they were recorded at.
    version: u64,
}

struct BlockTape {
    input: Array2<f64>,
    pre: Array2<f64>,
    mask: Option<Array2<f64>>,
    hidden: Array2<f64>,
}

/// Activations and dropout masks from one forward call. Consumed by value in
/// [`ModelState::backward`].
pub struct ForwardTape {
    version: u64,
    columns: Array2<f64>,
    conv_pre: Array2<f64>,
    conv_mask: Option<Array2<f64>>,
    blocks: Vec<BlockTape>,
    final_hidden: Array2<f64>,
    probs: Array2<f64>,
}

impl ForwardTape {
    /// Pre-ReLU activation of block `b` (`W1 · h + b1`).
    pub fn block_preactivation(&self, b: usize) -> ArrayView2<'_, f64> {
        self.blocks[b].pre.view()
    }
}

fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

fn dropout_mask(rng: &mut impl Rng, shape: (usize, usize), rate: f64) -> Array2<f64> {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < keep { scale } else { 0.0 })
}

/// Initializes a model with weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` and
/// zero biases.
pub fn init_model(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<ModelState, ModelError> {
    cfg.validate()?;
    let tensors = cfg
        .param_shapes()
        .into_iter()
        .map(|(name, (rows, cols))| {
            if name.ends_with("bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                Array2::zeros((rows, cols))
            } else {
                let bound = 1.0 / (rows as f64).sqrt();
                Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
            }
        })
        .collect();
    Ok(ModelState {
        dropout: cfg.dropout,
        config: cfg.clone(),
        params: Params { tensors },
        update_count: 0,
        version: 0,
    })
}

impl ModelState {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        self.version += 1;
        &mut self.params
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    pub(crate) fn record_update(&mut self) {
        self.update_count += 1;
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn param_names(&self) -> Vec<String> {
        self.config.param_shapes().into_iter().map(|(n, _)| n).collect()
    }

    pub fn set_dropout(&mut self, rate: f64) -> Result<(), ModelError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(ModelError::DropoutRange(rate));
        }
        self.dropout = rate;
        self.version += 1;
        Ok(())
    }

    /// Swaps parameter storage with `other`, which must have matching shapes.
    pub(crate) fn swap_params(&mut self, other: &mut Params) {
        debug_assert!(self.params.same_shapes(other));
        std::mem::swap(&mut self.params, other);
        self.version += 1;
    }

    fn im2col(&self, features: ArrayView2<f64>) -> Array2<f64> {
        let k = self.config.conv_kernel;
        let f = self.config.feature_dim;
        let half = k / 2;
        let frames = features.nrows();
        let out_frames = self.config.output_frames(frames);
        let mut cols = Array2::zeros((out_frames, k * f));
        for j in 0..out_frames {
            let center = j * self.config.conv_stride;
            for tap in 0..k {
                let src = center as isize + tap as isize - half as isize;
                if src >= 0 && (src as usize) < frames {
                    cols.slice_mut(s![j, tap * f..(tap + 1) * f])
                        .assign(&features.row(src as usize));
                }
            }
        }
        cols
    }

    fn check_input(&self, features: ArrayView2<f64>) -> Result<(), ModelError> {
        if features.ncols() != self.config.feature_dim {
            return Err(ModelError::FeatureDim {
                expected: self.config.feature_dim,
                found: features.ncols(),
            });
        }
        if features.nrows() < self.config.conv_kernel {
            return Err(ModelError::InputTooShort {
                frames: features.nrows(),
                kernel: self.config.conv_kernel,
            });
        }
        Ok(())
    }

    /// Maps `T x F` features to `ceil(T / stride)` log-posterior frames.
    /// Train mode draws dropout masks from `rng`; eval mode never touches it.
    pub fn forward(
        &self,
        features: ArrayView2<f64>,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<(LogPosteriors, ForwardTape), ModelError> {
        self.check_input(features)?;
        let p = &self.params.tensors;
        let rate = match mode {
            Mode::Train => self.dropout,
            Mode::Eval => 0.0,
        };
        let mut mask = |shape| (rate > 0.0).then(|| dropout_mask(rng, shape, rate));

        let columns = self.im2col(features);
        let conv_pre = columns.dot(&p[0]) + &p[1];
        let conv_mask = mask(conv_pre.dim());
        let mut h = relu(&conv_pre);
        if let Some(m) = &conv_mask {
            h *= m;
        }

        let mut blocks = Vec::with_capacity(self.config.num_blocks);
        for b in 0..self.config.num_blocks {
            let base = 2 + 4 * b;
            let pre = h.dot(&p[base]) + &p[base + 1];
            let block_mask = mask(pre.dim());
            let mut hidden = relu(&pre);
            if let Some(m) = &block_mask {
                hidden *= m;
            }
            let next = &h + &(hidden.dot(&p[base + 2]) + &p[base + 3]);
            blocks.push(BlockTape {
                input: h,
                pre,
                mask: block_mask,
                hidden,
            });
            h = next;
        }

        let last = p.len() - 2;
        let logits = h.dot(&p[last]) + &p[last + 1];
        let lp = log_softmax_rows(logits.view());
        let probs = lp.mapv(f64::exp);
        Ok((
            LogPosteriors::from_normalized(lp),
            ForwardTape {
                version: self.version,
                columns,
                conv_pre,
                conv_mask,
                blocks,
                final_hidden: h,
                probs,
            },
        ))
    }

    /// Deterministic inference without a tape.
    pub fn forward_eval(&self, features: ArrayView2<f64>) -> Result<LogPosteriors, ModelError> {
        struct NoRng;
        impl rand::RngCore for NoRng {
            fn next_u32(&mut self) -> u32 {
                unreachable!("eval mode draws no randomness")
            }
            fn next_u64(&mut self) -> u64 {
                unreachable!("eval mode draws no randomness")
            }
            fn fill_bytes(&mut self, _: &mut [u8]) {
                unreachable!("eval mode draws no randomness")
            }
        }
        self.forward(features, Mode::Eval, &mut NoRng).map(|(lp, _)| lp)
    }

    /// Gradients of a scalar loss given its derivative `grad_out` with
    /// respect to the log-posteriors produced by the forward call that
    /// recorded `tape`.
    pub fn backward(&self, tape: ForwardTape, grad_out: ArrayView2<f64>) -> Result<Gradients, ModelError> {
        if tape.version != self.version {
            return Err(ModelError::StaleTape {
                tape: tape.version,
                model: self.version,
            });
        }
        if grad_out.dim() != tape.probs.dim() {
            return Err(ModelError::Shape(format!(
                "grad_out is {:?}, forward produced {:?}",
                grad_out.dim(),
                tape.probs.dim()
            )));
        }
        let p = &self.params.tensors;
        let mut grads = Params::zeros(&self.config);
        let g = &mut grads.tensors;

        // log-softmax: dz = g - softmax * rowsum(g)
        let row_sums = grad_out.sum_axis(Axis(1)).insert_axis(Axis(1));
        let g_logits = &grad_out - &(&tape.probs * &row_sums);
        let last = p.len() - 2;
        g[last] = tape.final_hidden.t().dot(&g_logits);
        g[last + 1] = g_logits.sum_axis(Axis(0)).insert_axis(Axis(0));
        let mut g_h = g_logits.dot(&p[last].t());

        for (b, block) in tape.blocks.iter().enumerate().rev() {
            let base = 2 + 4 * b;
            g[base + 2] = block.hidden.t().dot(&g_h);
            g[base + 3] = g_h.sum_axis(Axis(0)).insert_axis(Axis(0));
            let mut g_pre = g_h.dot(&p[base + 2].t());
            if let Some(m) = &block.mask {
                g_pre *= m;
            }
            ndarray::Zip::from(&mut g_pre)
                .and(&block.pre)
                .for_each(|gv, &pre| {
                    if pre <= 0.0 {
                        *gv = 0.0
                    }
                });
            g[base] = block.input.t().dot(&g_pre);
            g[base + 1] = g_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
            g_h += &g_pre.dot(&p[base].t());
        }

        if let Some(m) = &tape.conv_mask {
            g_h *= m;
        }
        ndarray::Zip::from(&mut g_h)
            .and(&tape.conv_pre)
            .for_each(|gv, &pre| {
                if pre <= 0.0 {
                    *gv = 0.0
                }
            });
        g[0] = tape.columns.t().dot(&g_h);
        g[1] = g_h.sum_axis(Axis(0)).insert_axis(Axis(0));
        Ok(grads)
    }

    /// Binary checkpoint: magic, format version, config, dropout, update
    /// count, then named little-endian f64 tensors with shape prefixes.
    pub fn write_to<W: Write>(&self, w: &mut BinWriter<W>) -> std::io::Result<()> {
        w.magic(MODEL_MAGIC)?;
        w.u32(MODEL_FORMAT)?;
        let c = &self.config;
        for v in [c.feature_dim, c.conv_kernel, c.conv_stride, c.hidden_dim, c.num_blocks, c.vocab_size] {
            w.usize(v)?;
        }
        w.f64(c.dropout)?;
        w.f64(self.dropout)?;
        w.u64(self.update_count)?;
        self.params.write(w, &self.param_names())
    }

    pub fn read_from<R: Read>(r: &mut BinReader<R>) -> Result<Self, ModelError> {
        r.expect_magic(MODEL_MAGIC)?;
        let format = r.u32()?;
        if format != MODEL_FORMAT {
            return Err(FormatError::Version {
                what: "model",
                expected: MODEL_FORMAT.to_string(),
                found: format.to_string(),
            }
            .into());
        }
        let config = ModelConfig {
            feature_dim: r.usize()?,
            conv_kernel: r.usize()?,
            conv_stride: r.usize()?,
            hidden_dim: r.usize()?,
            num_blocks: r.usize()?,
            vocab_size: r.usize()?,
            dropout: r.f64()?,
        };
        config.validate()?;
        let dropout = r.f64()?;
        if !(0.0..1.0).contains(&dropout) {
            return Err(ModelError::DropoutRange(dropout));
        }
        let update_count = r.u64()?;
        let params = Params::read(r, &config)?;
        Ok(Self {
            config,
            params,
            dropout,
            update_count,
            version: 0,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new(Vec::new());
        self.write_to(&mut w).expect("writing to a Vec cannot fail");
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        Self::read_from(&mut BinReader::new(bytes))
    }

    /// Equality of everything a checkpoint stores.
    pub fn same_contents(&self, other: &ModelState) -> bool {
        self.config == other.config
            && self.dropout.to_bits() == other.dropout.to_bits()
            && self.update_count == other.update_count
            && self.params.same_shapes(&other.params)
            && self.params.iter().zip(other.params.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::{ctc_loss, TokenSeq};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(dropout: f64) -> ModelConfig {
        ModelConfig {
            feature_dim: 4,
            conv_kernel: 3,
            conv_stride: 2,
            hidden_dim: 6,
            num_blocks: 2,
            vocab_size: 3,
            dropout,
        }
    }

    fn features(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((frames, dim), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg(0.0);
        cfg.conv_kernel = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg(0.0);
        cfg.dropout = 1.0;
        assert!(matches!(cfg.validate(), Err(ModelError::DropoutRange(_))));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = small_cfg(0.1);
        let a = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let c = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(a.same_contents(&b));
        assert!(a.params() != c.params());
    }

    #[test]
    fn parameter_count_matches_shape_arithmetic() {
        let cfg = ModelConfig {
            feature_dim: 8,
            conv_kernel: 7,
            conv_stride: 3,
            hidden_dim: 8,
            num_blocks: 2,
            vocab_size: 5,
            dropout: 0.0,
        };
        let m = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // conv 7*8*8 + 8, blocks 2 * (8*8 + 8 + 8*8 + 8), out 8*6 + 6
        assert_eq!(m.params().count(), 456 + 288 + 54);
    }

    #[test]
    fn output_length_is_ceil_of_stride() {
        let cfg = ModelConfig {
            feature_dim: 2,
            conv_kernel: 7,
            conv_stride: 3,
            hidden_dim: 3,
            num_blocks: 1,
            vocab_size: 2,
            dropout: 0.0,
        };
        let m = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lp = m.forward_eval(features(&mut rng, 100, 2).view()).unwrap();
        assert_eq!(lp.frames(), 34);
        assert_eq!(cfg.output_frames(100), 34);
    }

    #[test]
    fn rows_are_log_distributions() {
        let m = init_model(&small_cfg(0.3), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = features(&mut rng, 11, 4);
        let (lp, _) = m.forward(x.view(), Mode::Train, &mut rng).unwrap();
        assert!(LogPosteriors::new(lp.into_inner()).is_ok());
    }

    #[test]
    fn short_input_is_rejected() {
        let m = init_model(&small_cfg(0.0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Array2::zeros((2, 4));
        assert!(matches!(m.forward_eval(x.view()), Err(ModelError::InputTooShort { .. })));
        let x = Array2::zeros((5, 3));
        assert!(matches!(m.forward_eval(x.view()), Err(ModelError::FeatureDim { .. })));
    }

    #[test]
    fn eval_is_pure_and_train_without_dropout_matches_eval() {
        let m = init_model(&small_cfg(0.0), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = features(&mut rng, 9, 4);
        let a = m.forward_eval(x.view()).unwrap();
        let b = m.forward_eval(x.view()).unwrap();
        assert_eq!(a, b);
        let (c, _) = m.forward(x.view(), Mode::Train, &mut rng).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn dropout_change_affects_train_mode_only() {
        let mut m = init_model(&small_cfg(0.5), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = features(&mut rng, 15, 4);
        let eval_before = m.forward_eval(x.view()).unwrap();
        // fraction of zeroed block-0 hidden units tracks the rate
        let zero_fraction = |m: &ModelState, rng: &mut ChaCha8Rng| {
            let mut zeros = 0usize;
            let mut total = 0usize;
            for _ in 0..400 {
                let (_, tape) = m.forward(x.view(), Mode::Train, rng).unwrap();
                let mask = tape.blocks[0].mask.as_ref().unwrap();
                zeros += mask.iter().filter(|&&v| v == 0.0).count();
                total += mask.len();
            }
            zeros as f64 / total as f64
        };
        let high = zero_fraction(&m, &mut rng);
        m.set_dropout(0.1).unwrap();
        let low = zero_fraction(&m, &mut rng);
        assert!((high - 0.5).abs() < 0.02, "{high}");
        assert!((low - 0.1).abs() < 0.02, "{low}");
        assert_eq!(m.forward_eval(x.view()).unwrap(), eval_before);
        assert!(m.set_dropout(1.0).is_err());
        assert!(m.set_dropout(-0.1).is_err());
    }

    #[test]
    fn inverted_dropout_preserves_expected_preactivation() {
        let m = init_model(&small_cfg(0.5), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = features(&mut rng, 7, 4);
        let (_, eval_tape) = m.forward(x.view(), Mode::Eval, &mut rng).unwrap();
        let target = eval_tape.block_preactivation(0).to_owned();
        let n = 10_000;
        let mut sum = Array2::<f64>::zeros(target.dim());
        let mut sum_sq = Array2::<f64>::zeros(target.dim());
        for _ in 0..n {
            let (_, tape) = m.forward(x.view(), Mode::Train, &mut rng).unwrap();
            let pre = tape.block_preactivation(0);
            sum += &pre;
            sum_sq += &pre.mapv(|v| v * v);
        }
        for ((s, sq), t) in sum.iter().zip(sum_sq.iter()).zip(target.iter()) {
            let mean = s / n as f64;
            let var = sq / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            assert!((mean - t).abs() <= 3.0 * se + 1e-12, "mean {mean} vs eval {t} (se {se})");
        }
    }

    #[test]
    fn backward_zero_and_linearity() {
        let m = init_model(&small_cfg(0.0), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = features(&mut rng, 10, 4);
        let (lp, tape) = m.forward(x.view(), Mode::Eval, &mut rng).unwrap();
        let zero = m.backward(tape, Array2::zeros(lp.values().dim()).view()).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));

        let g = Array2::from_shape_simple_fn(lp.values().dim(), || rng.random_range(-1.0..1.0));
        let (_, t1) = m.forward(x.view(), Mode::Eval, &mut rng).unwrap();
        let (_, t2) = m.forward(x.view(), Mode::Eval, &mut rng).unwrap();
        let single = m.backward(t1, g.view()).unwrap();
        let double = m.backward(t2, (&g * 2.0).view()).unwrap();
        for (a, b) in single.iter().zip(double.iter()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn stale_tape_is_refused() {
        let mut m = init_model(&small_cfg(0.0), &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = features(&mut rng, 8, 4);
        let (lp, tape) = m.forward(x.view(), Mode::Eval, &mut rng).unwrap();
        m.params_mut().tensors[0][[0, 0]] += 1.0;
        let err = m.backward(tape, Array2::zeros(lp.values().dim()).view()).unwrap_err();
        assert!(matches!(err, ModelError::StaleTape { .. }));
    }

    fn loss_at(m: &ModelState, x: &Array2<f64>, target: &TokenSeq) -> f64 {
        ctc_loss(&m.forward_eval(x.view()).unwrap(), target).loss
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let cfg = small_cfg(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut model = init_model(&cfg, &mut rng).unwrap();
        let x = features(&mut rng, 12, 4);
        let target = TokenSeq::new(vec![0, 2, 1]);
        let (lp, tape) = model.forward(x.view(), Mode::Eval, &mut rng).unwrap();
        let out = ctc_loss(&lp, &target);
        let grads = model.backward(tape, out.grad.view()).unwrap();

        let eps = 1e-4;
        let mut worst: f64 = 0.0;
        for ti in 0..grads.tensors.len() {
            for idx in 0..grads.tensors[ti].len() {
                let (r, c) = (idx / grads.tensors[ti].ncols(), idx % grads.tensors[ti].ncols());
                let orig = model.params().tensors[ti][[r, c]];
                model.params_mut().tensors[ti][[r, c]] = orig + eps;
                let plus = loss_at(&model, &x, &target);
                model.params_mut().tensors[ti][[r, c]] = orig - eps;
                let minus = loss_at(&model, &x, &target);
                model.params_mut().tensors[ti][[r, c]] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                let analytic = grads.tensors[ti][[r, c]];
                let diff = (numeric - analytic).abs();
                if diff > 1e-7 {
                    worst = worst.max(diff / numeric.abs().max(analytic.abs()));
                }
            }
        }
        assert!(worst <= 1e-3, "max relative error {worst}");
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut m = init_model(&small_cfg(0.4), &mut ChaCha8Rng::seed_from_u64(16)).unwrap();
        m.set_dropout(0.1).unwrap();
        m.record_update();
        let bytes = m.to_bytes();
        let back = ModelState::from_bytes(&bytes).unwrap();
        assert!(m.same_contents(&back));
        assert_eq!(back.to_bytes(), bytes);
        assert!(ModelState::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
