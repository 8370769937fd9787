//! The Vision-FAN block and the FAN-UNet encoder/decoder assembly.
//!
//! A Vision-FAN block adds a learnable positional embedding at entry, then
//! applies pre-norm windowed self-attention and a FANLayer2D feedforward,
//! each wrapped in a residual connection. The U-Net places the block at the
//! bottleneck: an encoder of double-conv stages with 2x2 max pooling,
//! a mirrored decoder of bilinear upsampling with skip concatenation, and a
//! final 1x1 projection to logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{PositionalEmbedding2d, WindowAttention};
use crate::error::{Error, Result, TensorError};
use crate::fan::{Activation, FanLayer2d};
use crate::tensor::{bilinear_upsample2x, concat, conv2d, layer_norm, maxpool2x2, Element, Tensor};

// ── Building blocks ──────────────────────────────────────────────────

/// conv3x3 (or 1x1) -> per-position channel layer norm -> GELU.
#[derive(Debug, Clone)]
pub struct ConvUnit<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    padding: usize,
}

impl<E: Element> ConvUnit<E> {
    fn new(c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvUnit {
            weight: Tensor::param_kaiming(&[c_out, c_in, k, k], c_in * k * k, rng),
            bias: Tensor::param_zeros(&[c_out]),
            gamma: {
                let g = Tensor::param_zeros(&[c_out]);
                g.set_data(vec![E::one(); c_out]).unwrap();
                g
            },
            beta: Tensor::param_zeros(&[c_out]),
            padding: k / 2,
        }
    }

    fn forward(&self, x: &Tensor<E>) -> std::result::Result<Tensor<E>, TensorError> {
        let y = conv2d(x, &self.weight, &self.bias, 1, self.padding)?;
        Ok(layer_norm(&y, &[1], &self.gamma, &self.beta, 1e-5)?.gelu())
    }

    fn parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

/// Plain 1x1 convolution (no norm, no activation).
#[derive(Debug, Clone)]
struct Conv1x1<E: Element> {
    weight: Tensor<E>,
    bias: Tensor<E>,
}

impl<E: Element> Conv1x1<E> {
    fn new(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Conv1x1 {
            weight: Tensor::param_kaiming(&[c_out, c_in, 1, 1], c_in, rng),
            bias: Tensor::param_zeros(&[c_out]),
        }
    }

    fn forward(&self, x: &Tensor<E>) -> std::result::Result<Tensor<E>, TensorError> {
        conv2d(x, &self.weight, &self.bias, 1, 0)
    }

    fn parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

// ── Vision-FAN block ─────────────────────────────────────────────────

/// Toggles and dimensions of one Vision-FAN block. The three `enable_*`
/// switches correspond to the ablation variants: positional embedding,
/// windowed self-attention, FAN feedforward.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VisionFanBlockConfig {
    pub channels: usize,
    pub window_size: usize,
    pub num_heads: usize,
    pub p_ratio: f64,
    pub enable_positional: bool,
    pub enable_attention: bool,
    pub enable_fan_ffn: bool,
}

impl VisionFanBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enable_attention && self.channels % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by num_heads {}",
                self.channels, self.num_heads
            )));
        }
        if self.p_ratio <= 0.0 || self.p_ratio >= 0.5 {
            return Err(Error::Config(format!("p_ratio {} outside (0, 0.5)", self.p_ratio)));
        }
        Ok(())
    }
}

/// Positional embedding + windowed attention + FAN feedforward, pre-norm
/// residual style. Disabled components are skipped entirely (and allocate no
/// parameters), so a block with all toggles off is the identity.
#[derive(Debug, Clone)]
pub struct VisionFanBlock<E: Element> {
    pub config: VisionFanBlockConfig,
    positional: Option<PositionalEmbedding2d<E>>,
    attn_norm: Option<(Tensor<E>, Tensor<E>)>,
    attention: Option<WindowAttention<E>>,
    ffn_norm: Option<(Tensor<E>, Tensor<E>)>,
    ffn: Option<FanLayer2d<E>>,
}

fn ln_pair<E: Element>(channels: usize) -> (Tensor<E>, Tensor<E>) {
    let gamma = Tensor::param_zeros(&[channels]);
    gamma.set_data(vec![E::one(); channels]).unwrap();
    (gamma, Tensor::param_zeros(&[channels]))
}

impl<E: Element> VisionFanBlock<E> {
    /// Build a block for feature maps of extent `feat_h x feat_w`.
    pub fn new(config: &VisionFanBlockConfig, feat_h: usize, feat_w: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        Ok(VisionFanBlock {
            config: config.clone(),
            positional: config
                .enable_positional
                .then(|| PositionalEmbedding2d::new(c, feat_h, feat_w, rng)),
            attn_norm: config.enable_attention.then(|| ln_pair(c)),
            attention: config
                .enable_attention
                .then(|| WindowAttention::new(c, config.window_size, config.num_heads, rng)),
            ffn_norm: config.enable_fan_ffn.then(|| ln_pair(c)),
            ffn: config
                .enable_fan_ffn
                .then(|| FanLayer2d::new(c, c, config.p_ratio, Activation::Gelu, rng)),
        })
    }

    pub fn forward(&self, x: &Tensor<E>) -> std::result::Result<Tensor<E>, TensorError> {
        let mut h = match &self.positional {
            Some(pe) => pe.forward(x)?,
            None => x.clone(),
        };
        if let (Some(attn), Some((g, b))) = (&self.attention, &self.attn_norm) {
            let normed = layer_norm(&h, &[1], g, b, 1e-5)?;
            h = h.add(&attn.forward(&normed)?)?;
        }
        if let (Some(ffn), Some((g, b))) = (&self.ffn, &self.ffn_norm) {
            let normed = layer_norm(&h, &[1], g, b, 1e-5)?;
            h = h.add(&ffn.forward(&normed)?)?;
        }
        Ok(h)
    }

    pub fn parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        if let Some(pe) = &self.positional {
            out.extend(pe.parameters(&format!("{prefix}.pos")));
        }
        if let Some((g, b)) = &self.attn_norm {
            out.push((format!("{prefix}.attn_norm.gamma"), g.clone()));
            out.push((format!("{prefix}.attn_norm.beta"), b.clone()));
        }
        if let Some(attn) = &self.attention {
            out.extend(attn.parameters(&format!("{prefix}.attn")));
        }
        if let Some((g, b)) = &self.ffn_norm {
            out.push((format!("{prefix}.ffn_norm.gamma"), g.clone()));
            out.push((format!("{prefix}.ffn_norm.beta"), b.clone()));
        }
        if let Some(ffn) = &self.ffn {
            out.extend(ffn.parameters(&format!("{prefix}.ffn")));
        }
    }
}

// ── FAN-UNet ─────────────────────────────────────────────────────────

/// Full-model configuration. Defaults target 256x256 RGB inputs with a
/// single-channel logit map out.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub input_channels: usize,
    pub output_channels: usize,
    pub num_stages: usize,
    pub base_channels: usize,
    pub bottleneck_blocks: usize,
    pub input_resolution: usize,
    pub window_size: usize,
    pub num_heads: usize,
    pub p_ratio: f64,
    pub enable_positional: bool,
    pub enable_attention: bool,
    pub enable_fan_ffn: bool,
    /// Also insert a Vision-FAN block after the deepest encoder stage.
    pub fan_block_at_deepest_encoder: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            input_channels: 3,
            output_channels: 1,
            num_stages: 4,
            base_channels: 32,
            bottleneck_blocks: 1,
            input_resolution: 256,
            window_size: 8,
            num_heads: 4,
            p_ratio: 0.25,
            enable_positional: true,
            enable_attention: true,
            enable_fan_ffn: true,
            fan_block_at_deepest_encoder: false,
        }
    }
}

impl UNetConfig {
    /// Channel width at the bottleneck: `base * 2^num_stages`.
    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.num_stages
    }

    /// Spatial extent at the bottleneck: `resolution / 2^num_stages`.
    pub fn bottleneck_resolution(&self) -> usize {
        self.input_resolution >> self.num_stages
    }

    /// True when the Vision-FAN block is replaced by a plain convolution
    /// (the "without Vision-FAN block" ablation).
    pub fn vision_fan_replaced_by_conv(&self) -> bool {
        !self.enable_positional && !self.enable_attention && !self.enable_fan_ffn
    }

    pub fn block_config(&self, channels: usize) -> VisionFanBlockConfig {
        VisionFanBlockConfig {
            channels,
            window_size: self.window_size,
            num_heads: self.num_heads,
            p_ratio: self.p_ratio,
            enable_positional: self.enable_positional,
            enable_attention: self.enable_attention,
            enable_fan_ffn: self.enable_fan_ffn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_stages == 0 {
            return Ok(()); // degenerate: single 1x1 head only
        }
        if self.input_resolution % (1 << self.num_stages) != 0 {
            return Err(Error::Config(format!(
                "input resolution {} not divisible by 2^{}",
                self.input_resolution, self.num_stages
            )));
        }
        if self.enable_attention {
            let bres = self.bottleneck_resolution();
            if bres % self.window_size != 0 {
                return Err(Error::Config(format!(
                    "bottleneck extent {bres} not divisible by window size {}",
                    self.window_size
                )));
            }
            if self.bottleneck_channels() % self.num_heads != 0 {
                return Err(Error::Config(format!(
                    "bottleneck channels {} not divisible by num_heads {}",
                    self.bottleneck_channels(),
                    self.num_heads
                )));
            }
        }
        if self.bottleneck_blocks == 0 && !self.vision_fan_replaced_by_conv() {
            return Err(Error::Config("bottleneck_blocks must be at least 1".into()));
        }
        Ok(())
    }
}

enum BottleneckBlock<E: Element> {
    VisionFan(VisionFanBlock<E>),
    /// Equal-width 3x3 conv unit standing in for the Vision-FAN block.
    Conv(ConvUnit<E>),
}

/// The full segmentation model: weights plus the configuration they were
/// built for.
pub struct FanUnet<E: Element> {
    pub config: UNetConfig,
    encoder: Vec<[ConvUnit<E>; 2]>,
    encoder_fan: Option<VisionFanBlock<E>>,
    bottleneck_in: Option<[ConvUnit<E>; 2]>,
    bottleneck: Vec<BottleneckBlock<E>>,
    reduce: Vec<Conv1x1<E>>,
    decoder: Vec<[ConvUnit<E>; 2]>,
    head: Conv1x1<E>,
}

impl<E: Element> FanUnet<E> {
    /// Deterministically initialize all weights from `seed`.
    pub fn new(config: &UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = config.clone();
        let s = cfg.num_stages;
        let base = cfg.base_channels;

        if s == 0 {
            return Ok(FanUnet {
                head: Conv1x1::new(cfg.input_channels, cfg.output_channels, &mut rng),
                config: cfg,
                encoder: Vec::new(),
                encoder_fan: None,
                bottleneck_in: None,
                bottleneck: Vec::new(),
                reduce: Vec::new(),
                decoder: Vec::new(),
            });
        }

        let stage_ch = |i: usize| base << i; // channels after encoder stage i
        let mut encoder = Vec::with_capacity(s);
        for i in 0..s {
            let c_in = if i == 0 { cfg.input_channels } else { stage_ch(i - 1) };
            let c_out = stage_ch(i);
            encoder.push([ConvUnit::new(c_in, c_out, 3, &mut rng), ConvUnit::new(c_out, c_out, 3, &mut rng)]);
        }

        let encoder_fan = if cfg.fan_block_at_deepest_encoder && !cfg.vision_fan_replaced_by_conv() {
            let ch = stage_ch(s - 1);
            let res = cfg.input_resolution >> (s - 1);
            Some(VisionFanBlock::new(&cfg.block_config(ch), res, res, &mut rng)?)
        } else {
            None
        };

        let c_bot = cfg.bottleneck_channels();
        let bottleneck_in = Some([
            ConvUnit::new(stage_ch(s - 1), c_bot, 3, &mut rng),
            ConvUnit::new(c_bot, c_bot, 3, &mut rng),
        ]);

        let bres = cfg.bottleneck_resolution();
        let mut bottleneck = Vec::new();
        if cfg.vision_fan_replaced_by_conv() {
            bottleneck.push(BottleneckBlock::Conv(ConvUnit::new(c_bot, c_bot, 3, &mut rng)));
        } else {
            for _ in 0..cfg.bottleneck_blocks {
                bottleneck.push(BottleneckBlock::VisionFan(VisionFanBlock::new(
                    &cfg.block_config(c_bot),
                    bres,
                    bres,
                    &mut rng,
                )?));
            }
        }

        let mut reduce = Vec::with_capacity(s);
        let mut decoder = Vec::with_capacity(s);
        for i in 0..s {
            // decoder stage i consumes 2*stage_ch(i) after skip concat
            reduce.push(Conv1x1::new(stage_ch(i) * 2, stage_ch(i), &mut rng));
            decoder.push([
                ConvUnit::new(stage_ch(i) * 2, stage_ch(i), 3, &mut rng),
                ConvUnit::new(stage_ch(i), stage_ch(i), 3, &mut rng),
            ]);
        }

        let head = Conv1x1::new(stage_ch(0), cfg.output_channels, &mut rng);
        Ok(FanUnet {
            config: cfg,
            encoder,
            encoder_fan,
            bottleneck_in,
            bottleneck,
            reduce,
            decoder,
            head,
        })
    }

    /// Produce raw logits of shape `[B, output_channels, H, W]`.
    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let r = self.config.input_resolution;
        if x.ndim() != 4 || x.shape()[1] != self.config.input_channels || x.shape()[2] != r || x.shape()[3] != r {
            return Err(Error::Config(format!(
                "input shape {:?} does not match configured [B, {}, {r}, {r}]",
                x.shape(),
                self.config.input_channels
            )));
        }
        if self.config.num_stages == 0 {
            return Ok(self.head.forward(x)?);
        }

        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x.clone();
        let last = self.encoder.len() - 1;
        for (i, stage) in self.encoder.iter().enumerate() {
            h = stage[1].forward(&stage[0].forward(&h)?)?;
            if i == last {
                if let Some(fan) = &self.encoder_fan {
                    h = fan.forward(&h)?;
                }
            }
            skips.push(h.clone());
            h = maxpool2x2(&h)?;
        }

        let convs = self.bottleneck_in.as_ref().expect("staged model has bottleneck convs");
        h = convs[1].forward(&convs[0].forward(&h)?)?;
        for blk in &self.bottleneck {
            h = match blk {
                BottleneckBlock::VisionFan(b) => b.forward(&h)?,
                BottleneckBlock::Conv(c) => c.forward(&h)?,
            };
        }

        for i in (0..self.decoder.len()).rev() {
            h = bilinear_upsample2x(&h)?;
            h = self.reduce[i].forward(&h)?;
            h = concat(&[&h, &skips[i]], 1)?;
            h = self.decoder[i][1].forward(&self.decoder[i][0].forward(&h)?)?;
        }
        Ok(self.head.forward(&h)?)
    }

    /// Named learnable tensors, in a stable order.
    pub fn parameters(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        for (i, stage) in self.encoder.iter().enumerate() {
            stage[0].parameters(&format!("enc{i}.conv0"), &mut out);
            stage[1].parameters(&format!("enc{i}.conv1"), &mut out);
        }
        if let Some(fan) = &self.encoder_fan {
            fan.parameters("enc_fan", &mut out);
        }
        if let Some(convs) = &self.bottleneck_in {
            convs[0].parameters("bot.conv0", &mut out);
            convs[1].parameters("bot.conv1", &mut out);
        }
        for (i, blk) in self.bottleneck.iter().enumerate() {
            match blk {
                BottleneckBlock::VisionFan(b) => b.parameters(&format!("bot.fan{i}"), &mut out),
                BottleneckBlock::Conv(c) => c.parameters(&format!("bot.conv_replacement{i}"), &mut out),
            }
        }
        for (i, r) in self.reduce.iter().enumerate() {
            r.parameters(&format!("dec{i}.reduce"), &mut out);
        }
        for (i, stage) in self.decoder.iter().enumerate() {
            stage[0].parameters(&format!("dec{i}.conv0"), &mut out);
            stage[1].parameters(&format!("dec{i}.conv1"), &mut out);
        }
        self.head.parameters("head", &mut out);
        out
    }

    /// Total number of learnable scalars.
    pub fn count_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, p) in self.parameters() {
            p.zero_grad();
        }
    }
}
