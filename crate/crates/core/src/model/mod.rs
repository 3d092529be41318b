//! The networks: shared low-level 3D encoder `f_l`, task-dependent high-level
//! encoders (`h_h` for the parsing prior, `h_c` for contrast), the parsing
//! decoder `g_h`, and the motion/appearance projection heads `g_m`, `g_a`.
//!
//! Layers are descriptors; all weights live in one [`ParamSet`] keyed by
//! name, so the key encoder, optimiser state, gradients and checkpoints are
//! all plain name-to-array maps over the same layout.

pub mod checkpoint;
pub mod layers;
pub mod momentum;
pub mod params;

use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayD, ArrayView3, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::EPS;
use crate::teacher::SegmentationProbMap;
use crate::video_data::VideoClip;
use layers::{Conv3d, ConvTranspose2d, Layer, Linear, Sequential};
pub use momentum::{momentum_update, MomentumEncoder};
pub use params::ParamSet;

pub const LOW: &str = "f_l";
pub const PRIOR: &str = "h_h";
pub const CONTRASTIVE: &str = "h_c";
pub const SHARED_HIGH: &str = "h_shared";
pub const DECODER: &str = "g_h";
pub const MOTION: &str = "g_m";
pub const APPEARANCE: &str = "g_a";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Separate high-level encoders per task plus distillation.
    Full,
    /// No distillation branch.
    NoKd,
    /// One high-level encoder shared by every head.
    TaskIndependent,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoKd, Variant::TaskIndependent];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoKd => "no_kd",
            Variant::TaskIndependent => "task_independent",
        }
    }

    pub fn has_kd(self) -> bool {
        self != Variant::NoKd
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_kd" => Ok(Variant::NoKd),
            "task_independent" | "ti" => Ok(Variant::TaskIndependent),
            other => Err(Error::UnknownVariant(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingRole {
    Prior,
    Contrastive,
    Motion,
    Appearance,
    Representation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub role: EmbeddingRole,
}

impl Embedding {
    pub fn new(values: Vec<f64>, role: EmbeddingRole) -> Self {
        Self { values, role }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// `[z_h || z_c]`: the prior embedding occupies the leading coordinates.
pub fn concat_representation(z_h: &Embedding, z_c: &Embedding) -> Embedding {
    let mut values = Vec::with_capacity(z_h.dim() + z_c.dim());
    values.extend_from_slice(&z_h.values);
    values.extend_from_slice(&z_c.values);
    Embedding::new(values, EmbeddingRole::Representation)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub clip_length: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Output channels of each 3D convolution block.
    pub conv_channels: Vec<usize>,
    /// `(t, h, w)` stride of each block; kernels are 3x3x3 with padding 1.
    pub conv_strides: Vec<[usize; 3]>,
    /// Number of convolution blocks in the shared encoder; the remaining
    /// blocks are replicated inside every high-level encoder.
    pub split_depth: usize,
    /// Spatial grid of the average pool that opens each high-level encoder.
    pub pool_grid: usize,
    /// Subtract each pixel's mean over the clip before the first convolution.
    pub temporal_centering: bool,
    pub hidden_dim: usize,
    /// Dimension `D` of `z_h` and `z_c`.
    pub embed_dim: usize,
    /// Dimension of the normalised projection outputs.
    pub proj_dim: usize,
    pub decoder_channels: usize,
    /// Side of the coarse grid the decoder upsamples from (doubling per layer).
    pub decoder_grid: usize,
    pub seg_height: usize,
    pub seg_width: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            clip_length: 8,
            input_height: 32,
            input_width: 32,
            conv_channels: vec![16, 32],
            conv_strides: vec![[1, 2, 2], [2, 2, 2]],
            split_depth: 2,
            pool_grid: 2,
            temporal_centering: true,
            hidden_dim: 64,
            embed_dim: 32,
            proj_dim: 32,
            decoder_channels: 16,
            decoder_grid: 2,
            seg_height: 8,
            seg_width: 8,
            num_classes: 4,
        }
    }
}

const KERNEL: [usize; 3] = [3, 3, 3];
const PADDING: [usize; 3] = [1, 1, 1];

impl ModelConfig {
    fn conv_output(&self, upto: usize) -> [usize; 4] {
        let mut dims = [3, self.clip_length, self.input_height, self.input_width];
        for b in 0..upto {
            let s = self.conv_strides[b];
            let out = |n: usize, i: usize| (n + 2 * PADDING[i] - KERNEL[i]) / s[i] + 1;
            dims = [self.conv_channels[b], out(dims[1], 0), out(dims[2], 1), out(dims[3], 2)];
        }
        dims
    }

    /// `(C_f, T', H', W')` of the shared encoder's output.
    pub fn low_output_dims(&self) -> [usize; 4] {
        self.conv_output(self.split_depth)
    }

    fn upsample_layers(&self) -> usize {
        let mut n = 0;
        let mut size = self.decoder_grid;
        while size < self.seg_height {
            size *= 2;
            n += 1;
        }
        n
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.conv_channels.is_empty() || self.conv_channels.len() != self.conv_strides.len() {
            return bad("conv_channels and conv_strides must be non-empty and equally long".into());
        }
        if self.split_depth == 0 || self.split_depth > self.conv_channels.len() {
            return bad(format!("split_depth must lie in 1..={}", self.conv_channels.len()));
        }
        if self.conv_strides.iter().flatten().any(|&s| s == 0) || self.conv_channels.contains(&0) {
            return bad("conv strides and channels must be positive".into());
        }
        let [_, t, h, w] = self.conv_output(self.conv_channels.len());
        if t == 0 || h == 0 || w == 0 {
            return bad("input too small for the convolution stack".into());
        }
        if self.pool_grid == 0 || h % self.pool_grid != 0 || w % self.pool_grid != 0 {
            return bad(format!("final feature map {h}x{w} is not divisible by pool_grid {}", self.pool_grid));
        }
        if [self.hidden_dim, self.embed_dim, self.proj_dim, self.decoder_channels].contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if self.seg_height != self.seg_width {
            return bad("seg_height and seg_width must match".into());
        }
        let n = self.upsample_layers();
        if self.decoder_grid == 0 || n == 0 || self.decoder_grid << n != self.seg_height {
            return bad(format!(
                "seg size {} must equal decoder_grid {} times a positive power of two",
                self.seg_height, self.decoder_grid
            ));
        }
        Ok(())
    }
}

/// All layer descriptors of one model variant.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub low: Sequential,
    /// `h_h` (full), `h_shared` (task-independent) or absent (no_kd).
    pub prior: Option<Sequential>,
    /// `h_c` or `h_shared`.
    pub contrastive: Sequential,
    pub decoder: Option<Sequential>,
    pub motion: Sequential,
    pub appearance: Sequential,
}

fn conv_block(seq: &mut Sequential, cin: usize, cout: usize, stride: [usize; 3]) {
    let name = seq.next_name();
    seq.push(Layer::Conv3d(Conv3d {
        name,
        in_channels: cin,
        out_channels: cout,
        kernel: KERNEL,
        stride,
        padding: PADDING,
    }));
    seq.push(Layer::ChannelNorm);
    seq.push(Layer::Relu);
}

fn linear(seq: &mut Sequential, inf: usize, outf: usize) {
    let name = seq.next_name();
    seq.push(Layer::Linear(Linear {
        name,
        in_features: inf,
        out_features: outf,
    }));
}

fn high_level_encoder(cfg: &ModelConfig, prefix: &str) -> Sequential {
    let mut seq = Sequential::new(prefix);
    let mut cin = cfg.low_output_dims()[0];
    for b in cfg.split_depth..cfg.conv_channels.len() {
        conv_block(&mut seq, cin, cfg.conv_channels[b], cfg.conv_strides[b]);
        cin = cfg.conv_channels[b];
    }
    seq.push(Layer::GridPool { grid: cfg.pool_grid });
    seq.push(Layer::Standardize);
    linear(&mut seq, cin * cfg.pool_grid * cfg.pool_grid, cfg.hidden_dim);
    seq.push(Layer::Relu);
    linear(&mut seq, cfg.hidden_dim, cfg.embed_dim);
    seq
}

fn projection_head(cfg: &ModelConfig, prefix: &str) -> Sequential {
    let mut seq = Sequential::new(prefix);
    linear(&mut seq, cfg.embed_dim, cfg.embed_dim);
    seq.push(Layer::Relu);
    linear(&mut seq, cfg.embed_dim, cfg.proj_dim);
    seq
}

fn parsing_decoder(cfg: &ModelConfig) -> Sequential {
    let mut seq = Sequential::new(DECODER);
    let g = cfg.decoder_grid;
    let c0 = cfg.decoder_channels;
    linear(&mut seq, cfg.embed_dim, c0 * g * g);
    seq.push(Layer::Relu);
    seq.push(Layer::Reshape(vec![c0, g, g]));
    let n = cfg.upsample_layers();
    for k in 0..n {
        let last = k + 1 == n;
        let name = seq.next_name();
        seq.push(Layer::ConvTranspose2d(ConvTranspose2d {
            name,
            in_channels: c0,
            out_channels: if last { cfg.num_classes } else { c0 },
            kernel: 2,
            stride: 2,
        }));
        if !last {
            seq.push(Layer::Relu);
        }
    }
    seq
}

impl Architecture {
    pub fn new(cfg: &ModelConfig, variant: Variant) -> Result<Self> {
        cfg.validate()?;
        let mut low = Sequential::new(LOW);
        if cfg.temporal_centering {
            low.push(Layer::TemporalCenter);
        }
        let mut cin = 3;
        for b in 0..cfg.split_depth {
            conv_block(&mut low, cin, cfg.conv_channels[b], cfg.conv_strides[b]);
            cin = cfg.conv_channels[b];
        }
        let (prior, contrastive) = match variant {
            Variant::Full => (Some(high_level_encoder(cfg, PRIOR)), high_level_encoder(cfg, CONTRASTIVE)),
            Variant::NoKd => (None, high_level_encoder(cfg, CONTRASTIVE)),
            Variant::TaskIndependent => {
                let shared = high_level_encoder(cfg, SHARED_HIGH);
                (Some(shared.clone()), shared)
            }
        };
        Ok(Self {
            low,
            prior,
            contrastive,
            decoder: variant.has_kd().then(|| parsing_decoder(cfg)),
            motion: projection_head(cfg, MOTION),
            appearance: projection_head(cfg, APPEARANCE),
        })
    }

    /// Distinct sub-networks, each listed once.
    pub fn modules(&self) -> Vec<&Sequential> {
        let mut out = vec![&self.low];
        if let Some(p) = &self.prior {
            if p.prefix != self.contrastive.prefix {
                out.push(p);
            }
        }
        out.push(&self.contrastive);
        if let Some(d) = &self.decoder {
            out.push(d);
        }
        out.push(&self.motion);
        out.push(&self.appearance);
        out
    }

    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut params = ParamSet::new();
        for m in self.modules() {
            m.init(&mut params, seed);
        }
        params
    }

    /// Prefixes of the sub-networks mirrored by the key encoder.
    pub fn key_prefixes(&self) -> [&str; 3] {
        [LOW, self.contrastive.prefix.as_str(), APPEARANCE]
    }
}

/// Channel-first `(3, T, H, W)` network input for a clip.
pub fn clip_tensor(clip: &VideoClip) -> ArrayD<f64> {
    let (t, h, w, _) = clip.frames.dim();
    let mut out = vec![0.0; 3 * t * h * w];
    for ((k, i, j, c), v) in clip.frames.indexed_iter() {
        out[((c * t + k) * h + i) * w + j] = *v;
    }
    ArrayD::from_shape_vec(IxDyn(&[3, t, h, w]), out).expect("clip tensor shape")
}

/// `x / max(||x||, eps)`.
pub fn l2_normalize(x: &[f64]) -> Vec<f64> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(EPS);
    x.iter().map(|v| v / n).collect()
}

/// Backward of [`l2_normalize`] given its input `x` and output `y`.
pub fn l2_normalize_backward(x: &[f64], y: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let raw = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if raw <= EPS {
        return grad_out.iter().map(|g| g / EPS).collect();
    }
    let dot: f64 = y.iter().zip(grad_out).map(|(a, b)| a * b).sum();
    grad_out.iter().zip(y).map(|(g, yi)| (g - yi * dot) / raw).collect()
}

/// Backward of the class-axis softmax: `probs` are `(H, W, C)`, the returned
/// gradient is laid out like the channel-first logits `(C, H, W)`.
pub fn softmax_backward(probs: ArrayView3<f64>, grad_probs: ArrayView3<f64>) -> ArrayD<f64> {
    let (h, w, c) = probs.dim();
    let mut out = ArrayD::zeros(IxDyn(&[c, h, w]));
    for i in 0..h {
        for j in 0..w {
            let dot: f64 = (0..c).map(|k| probs[[i, j, k]] * grad_probs[[i, j, k]]).sum();
            for k in 0..c {
                out[[k, i, j]] = probs[[i, j, k]] * (grad_probs[[i, j, k]] - dot);
            }
        }
    }
    out
}

fn logits_to_map(logits: &ArrayD<f64>) -> SegmentationProbMap {
    let view = logits
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("decoder logits are (C, H, W)");
    SegmentationProbMap::from_logits(view)
}

/// A model bundle: variant, architecture and student parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub variant: Variant,
    pub arch: Architecture,
    pub params: ParamSet,
}

impl Model {
    /// Build and initialise a model. Parameter draws are keyed by name, so
    /// variants built from the same seed share their `f_l` initialisation.
    pub fn build(config: &ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        let arch = Architecture::new(config, variant)?;
        let params = arch.init_params(seed);
        Ok(Self {
            config: config.clone(),
            variant,
            arch,
            params,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    pub fn check_clip(&self, clip: &VideoClip) -> Result<()> {
        let (t, h, w, c) = clip.frames.dim();
        let cfg = &self.config;
        if (t, h, w, c) != (cfg.clip_length, cfg.input_height, cfg.input_width, 3) {
            return Err(Error::Shape(format!(
                "clip is {:?}, model expects ({}, {}, {}, 3)",
                (t, h, w, c),
                cfg.clip_length,
                cfg.input_height,
                cfg.input_width
            )));
        }
        Ok(())
    }

    /// Output of the shared encoder, `(C_f, T', H', W')`.
    pub fn low_features(&self, clip: &VideoClip) -> Result<ArrayD<f64>> {
        self.check_clip(clip)?;
        Ok(self.arch.low.infer(&self.params, clip_tensor(clip)))
    }

    /// `z_h = h_h(f_l(X))`.
    pub fn encode_prior(&self, clip: &VideoClip) -> Result<Embedding> {
        let prior = self
            .arch
            .prior
            .as_ref()
            .ok_or_else(|| Error::Config(format!("variant {} has no prior branch", self.variant)))?;
        let low = self.low_features(clip)?;
        let z = prior.infer(&self.params, low);
        Ok(Embedding::new(z.into_raw_vec_and_offset().0, EmbeddingRole::Prior))
    }

    /// `z_c = h_c(f_l(X))`.
    pub fn encode_contrastive(&self, clip: &VideoClip) -> Result<Embedding> {
        let low = self.low_features(clip)?;
        let z = self.arch.contrastive.infer(&self.params, low);
        Ok(Embedding::new(z.into_raw_vec_and_offset().0, EmbeddingRole::Contrastive))
    }

    /// `F_h = softmax(g_h(z_h))`, laid out `(H_s, W_s, C)`.
    pub fn decode_parsing(&self, z_h: &Embedding) -> Result<SegmentationProbMap> {
        let decoder = self
            .arch
            .decoder
            .as_ref()
            .ok_or_else(|| Error::Config(format!("variant {} has no decoder", self.variant)))?;
        self.check_embedding(z_h, self.config.embed_dim)?;
        let logits = decoder.infer(&self.params, vec_tensor(&z_h.values));
        Ok(logits_to_map(&logits))
    }

    pub fn project_motion(&self, z_c: &Embedding) -> Result<Embedding> {
        self.project(&self.arch.motion, z_c, EmbeddingRole::Motion)
    }

    pub fn project_appearance(&self, z_c: &Embedding) -> Result<Embedding> {
        self.project(&self.arch.appearance, z_c, EmbeddingRole::Appearance)
    }

    fn project(&self, head: &Sequential, z_c: &Embedding, role: EmbeddingRole) -> Result<Embedding> {
        self.check_embedding(z_c, self.config.embed_dim)?;
        let out = head.infer(&self.params, vec_tensor(&z_c.values));
        Ok(Embedding::new(l2_normalize(out.as_slice().expect("contiguous")), role))
    }

    fn check_embedding(&self, z: &Embedding, dim: usize) -> Result<()> {
        if z.dim() != dim {
            return Err(Error::Shape(format!("embedding has dimension {}, expected {dim}", z.dim())));
        }
        Ok(())
    }

    /// Final clip representation: `[z_h || z_c]`, or `z_c` alone without a prior branch.
    pub fn representation(&self, clip: &VideoClip) -> Result<Embedding> {
        let low = self.low_features(clip)?;
        let z_c = self.arch.contrastive.infer(&self.params, low.clone());
        let z_c = Embedding::new(z_c.into_raw_vec_and_offset().0, EmbeddingRole::Contrastive);
        match &self.arch.prior {
            Some(prior) => {
                let z_h = prior.infer(&self.params, low);
                let z_h = Embedding::new(z_h.into_raw_vec_and_offset().0, EmbeddingRole::Prior);
                Ok(concat_representation(&z_h, &z_c))
            }
            None => Ok(Embedding::new(z_c.values, EmbeddingRole::Representation)),
        }
    }

    pub fn representation_dim(&self) -> usize {
        match self.arch.prior {
            Some(_) => 2 * self.config.embed_dim,
            None => self.config.embed_dim,
        }
    }

    /// Normalised appearance key of `clip` under the key-encoder parameters `shadow`.
    pub fn key_embedding(&self, shadow: &ParamSet, clip: &VideoClip) -> Result<Vec<f64>> {
        self.check_clip(clip)?;
        let low = self.arch.low.infer(shadow, clip_tensor(clip));
        let z = self.arch.contrastive.infer(shadow, low);
        let out = self.arch.appearance.infer(shadow, z);
        Ok(l2_normalize(out.as_slice().expect("contiguous")))
    }
}

pub(crate) fn vec_tensor(values: &[f64]) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(&[values.len()]), values.to_vec()).expect("vector shape")
}
