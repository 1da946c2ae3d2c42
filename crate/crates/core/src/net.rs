//! The segmentation network: a five-level volumetric U-Net encoder with an
//! ASPP bottleneck, one shared decoder body feeding a reconstruction head
//! and a segmentation head, and an optional stack of per-level adapters
//! with windowed self-attention and reverse mutual attention.
//!
//! Activations are `[B, C, H, W, T]`. All forward passes are built on a
//! [`Graph`] so that any of them can be differentiated; the tensor-level
//! methods are conveniences for inference.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{FeaturePyramid, LEVELS};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeom;
use crate::param::{Fnv, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const ASPP_DILATIONS: [usize; 4] = [1, 6, 12, 18];
pub const LEAKY_SLOPE: f64 = 0.01;
/// Spatial dims must be divisible by `2^(LEVELS - 1)`.
pub const DIM_DIVISOR: usize = 16;
/// Channels per attention head.
const HEAD_WIDTH: usize = 32;
/// Group norm needs a few voxels per channel; coarser levels fall back
/// to normalizing all channels jointly.
const MIN_NORM_VOXELS: usize = 8;
/// Upper bound on norm groups. Every group spans at least two channels:
/// with one channel per group (instance norm) each channel's spatial mean
/// is fixed by the affine terms, so pooled descriptors stop depending on
/// the input and the contrastive loss has nothing to align.
const MAX_NORM_GROUPS: usize = 8;

/// Largest divisor of `channels` that keeps two or more channels per group.
fn norm_groups(channels: usize) -> usize {
    (1..=(channels / 2).clamp(1, MAX_NORM_GROUPS)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// Ablation switches for the adapter stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum AdapterVariant {
    /// Windowed attention, channel/sequence pooling, sigmoid, reversal.
    #[default]
    Full,
    /// Gate with `a` instead of `1 - a`.
    NoReverse,
    /// No attention gate: the fused feature is added directly.
    NoAttention,
    /// A residual pointwise convolution replaces the attention block.
    ConvGate,
}

impl AdapterVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterVariant::Full => "full",
            AdapterVariant::NoReverse => "no-reverse",
            AdapterVariant::NoAttention => "no-attention",
            AdapterVariant::ConvGate => "conv-gate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AdapterVariant::Full),
            "no-reverse" => Ok(AdapterVariant::NoReverse),
            "no-attention" => Ok(AdapterVariant::NoAttention),
            "conv-gate" => Ok(AdapterVariant::ConvGate),
            _ => Err(Error::Config(format!("unknown adapter variant '{s}'"))),
        }
    }

    fn tag(self) -> u8 {
        match self {
            AdapterVariant::Full => 0,
            AdapterVariant::NoReverse => 1,
            AdapterVariant::NoAttention => 2,
            AdapterVariant::ConvGate => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub n_classes: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub aspp_dilations: [usize; 4],
    pub attention_window: [usize; 3],
    pub adapter_enabled: bool,
    pub adapter_variant: AdapterVariant,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 4,
            n_classes: 3,
            levels: LEVELS,
            base_channels: 16,
            aspp_dilations: ASPP_DILATIONS,
            attention_window: [2, 2, 2],
            adapter_enabled: true,
            adapter_variant: AdapterVariant::Full,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels != LEVELS {
            return Err(Error::Config(format!("levels must be {LEVELS}, got {}", self.levels)));
        }
        if self.aspp_dilations != ASPP_DILATIONS {
            return Err(Error::Config(format!("aspp_dilations must be {ASPP_DILATIONS:?}")));
        }
        if self.in_channels == 0 || self.n_classes == 0 || self.base_channels == 0 {
            return Err(Error::Config("in_channels, n_classes and base_channels must be > 0".into()));
        }
        if self.base_channels % 4 != 0 {
            return Err(Error::Config(format!("base_channels must be a multiple of 4, got {}", self.base_channels)));
        }
        if self.attention_window.contains(&0) {
            return Err(Error::Config("attention_window entries must be > 0".into()));
        }
        Ok(())
    }

    /// Channel width of level `i` (0-based).
    pub fn width(&self, i: usize) -> usize {
        self.base_channels << i
    }

    /// Stable FNV-1a hash of every architectural field.
    pub fn hash(&self) -> u64 {
        let mut h = Fnv::new();
        for v in [self.in_channels, self.n_classes, self.levels, self.base_channels] {
            h.write(&(v as u64).to_le_bytes());
        }
        for d in self.aspp_dilations.iter().chain(&self.attention_window) {
            h.write(&(*d as u64).to_le_bytes());
        }
        h.write(&[self.adapter_enabled as u8, self.adapter_variant.tag()]);
        h.finish()
    }
}

/// Parameter-name prefixes of the network parts.
pub const ENCODER_PREFIX: &str = "enc.";
pub const DECODER_PREFIX: &str = "dec.";
pub const ADAPTER_PREFIX: &str = "adapter.";
pub const HEAD_PREFIX: &str = "head.";
pub const SEG_HEAD_PREFIX: &str = "head.seg.";
pub const RECON_HEAD_PREFIX: &str = "head.recon.";

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
}

#[derive(Debug, Clone)]
struct Aspp {
    branches: Vec<(Conv, Norm)>,
    proj: Conv,
    norm: Norm,
}

#[derive(Debug, Clone, Copy)]
struct UpLevel {
    up: Conv,
    block: Block,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    ln2: Norm,
    mlp1: Linear,
    mlp2: Linear,
    heads: usize,
}

#[derive(Debug, Clone, Copy)]
enum Gate {
    Attention(Attention),
    Conv(Conv),
    None,
}

#[derive(Debug, Clone, Copy)]
struct Adapter {
    proj: Conv,
    reduce: Conv,
    fuse: Conv,
    out: Conv,
    gate: Gate,
}

/// The result of an adapted encoder pass on a graph.
#[derive(Debug, Clone)]
pub struct AdaptedPass {
    /// `F^i = F_ada^i + F_cp^i`, the features handed to the decoder.
    pub features: Vec<Var>,
    /// `F_cp^i`, the frozen encoder's output at each level.
    pub encoder: Vec<Var>,
    /// Mutual attention `a^i` as `[B, 1, H_i, W_i, 1]`, when the variant
    /// computes one.
    pub attention: Vec<Option<Var>>,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: SeededRng,
}

impl Init<'_> {
    fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * self.rng.normal()).collect();
        self.store.add(name, Tensor::from_vec(shape, data).unwrap())
    }

    fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, v))
    }

    /// He-normal conv weight `[cout, cin, k, k, k]` and zero bias.
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let std = libm::sqrt(2.0 / (cin * k * k * k) as f64);
        Conv {
            w: self.normal(&format!("{name}.w"), &[cout, cin, k, k, k], std),
            b: self.constant(&format!("{name}.b"), &[cout], 0.0),
        }
    }

    fn zero_conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        Conv {
            w: self.constant(&format!("{name}.w"), &[cout, cin, k, k, k], 0.0),
            b: self.constant(&format!("{name}.b"), &[cout], 0.0),
        }
    }

    /// Transposed conv weight `[cin, cout, 2, 2, 2]`; every output voxel sees
    /// one tap per input channel.
    fn up(&mut self, name: &str, cin: usize, cout: usize) -> Conv {
        let std = libm::sqrt(1.0 / cin as f64);
        Conv {
            w: self.normal(&format!("{name}.w"), &[cin, cout, 2, 2, 2], std),
            b: self.constant(&format!("{name}.b"), &[cout], 0.0),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm { g: self.constant(&format!("{name}.g"), &[c], 1.0), b: self.constant(&format!("{name}.b"), &[c], 0.0) }
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize) -> Linear {
        let std = libm::sqrt(1.0 / cin as f64);
        Linear {
            w: self.normal(&format!("{name}.w"), &[cout, cin], std),
            b: self.constant(&format!("{name}.b"), &[cout], 0.0),
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize) -> Block {
        Block {
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3),
            norm1: self.norm(&format!("{name}.norm1"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3),
            norm2: self.norm(&format!("{name}.norm2"), cout),
        }
    }
}

/// Adapter bottleneck width for a level of `c` channels.
pub fn adapter_width(c: usize) -> usize {
    (c / 4).max(4)
}

#[derive(Debug, Clone)]
pub struct Network {
    cfg: NetworkConfig,
    params: ParamStore,
    enc: Vec<Block>,
    aspp: Aspp,
    dec: Vec<UpLevel>,
    seg_head: Conv,
    recon_head: Conv,
    adapters: Vec<Adapter>,
}

/// Whether the complete-modality path should skip the adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Plain,
    Adapted,
}

impl Network {
    /// Builds a network with weights drawn from `seed`.
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, rng: SeededRng::with_stream(seed, 0) };
        let w = |i: usize| cfg.width(i);

        let mut enc = Vec::with_capacity(LEVELS);
        for i in 0..LEVELS {
            let cin = if i == 0 { cfg.in_channels } else { w(i - 1) };
            enc.push(init.block(&format!("enc.l{}", i + 1), cin, w(i)));
        }
        let c5 = w(LEVELS - 1);
        let bw = c5 / 4;
        let branches = cfg
            .aspp_dilations
            .iter()
            .map(|d| (init.conv(&format!("enc.aspp.d{d}"), c5, bw, 3), init.norm(&format!("enc.aspp.d{d}.norm"), bw)))
            .collect();
        let aspp = Aspp {
            branches,
            proj: init.conv("enc.aspp.proj", 4 * bw, c5, 1),
            norm: init.norm("enc.aspp.proj.norm", c5),
        };

        let mut dec = Vec::with_capacity(LEVELS - 1);
        for i in (0..LEVELS - 1).rev() {
            dec.push(UpLevel {
                up: init.up(&format!("dec.l{}.up", i + 1), w(i + 1), w(i)),
                block: init.block(&format!("dec.l{}", i + 1), 2 * w(i), w(i)),
            });
        }

        let mut adapters = Vec::new();
        if cfg.adapter_enabled {
            for i in 0..LEVELS {
                let c = w(i);
                let r = adapter_width(c);
                let cprev = if i == 0 { cfg.in_channels } else { w(i - 1) };
                let name = format!("adapter.l{}", i + 1);
                let proj = init.conv(&format!("{name}.proj"), cprev, r, 3);
                let reduce = init.conv(&format!("{name}.reduce"), c, r, 1);
                let fuse = init.conv(&format!("{name}.fuse"), r, r, 3);
                let out = init.zero_conv(&format!("{name}.out"), r, c, 1);
                let gate = match cfg.adapter_variant {
                    AdapterVariant::Full | AdapterVariant::NoReverse => Gate::Attention(Attention {
                        ln1: init.norm(&format!("{name}.attn.ln1"), c),
                        q: init.linear(&format!("{name}.attn.q"), c, r),
                        k: init.linear(&format!("{name}.attn.k"), c, r),
                        v: init.linear(&format!("{name}.attn.v"), c, r),
                        proj: init.linear(&format!("{name}.attn.proj"), r, c),
                        ln2: init.norm(&format!("{name}.attn.ln2"), c),
                        mlp1: init.linear(&format!("{name}.attn.mlp1"), c, r),
                        mlp2: init.linear(&format!("{name}.attn.mlp2"), r, c),
                        heads: (r / HEAD_WIDTH).max(1),
                    }),
                    AdapterVariant::ConvGate => Gate::Conv(init.conv(&format!("{name}.gate"), c, c, 1)),
                    AdapterVariant::NoAttention => Gate::None,
                };
                adapters.push(Adapter { proj, reduce, fuse, out, gate });
            }
        }

        let c1 = w(0);
        let seg_head = head_conv(&mut init, "head.seg", c1, cfg.n_classes);
        let recon_head = head_conv(&mut init, "head.recon", c1, cfg.in_channels);
        Ok(Network { cfg, params: store, enc, aspp, dec, seg_head, recon_head, adapters })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn has_adapters(&self) -> bool {
        !self.adapters.is_empty()
    }

    /// Redraws both output heads from an independent generator stream.
    pub fn reinit_heads(&mut self, seed: u64) {
        let mut rng = SeededRng::with_stream(seed, 1);
        for conv in [self.seg_head, self.recon_head] {
            let cin = self.params.get(conv.w).shape()[1];
            let std = libm::sqrt(1.0 / cin as f64);
            for v in self.params.get_mut(conv.w).data_mut() {
                *v = std * rng.normal();
            }
            for v in self.params.get_mut(conv.b).data_mut() {
                *v = 0.0;
            }
        }
    }

    /// Replaces parameter values by name from `other`. Every name in
    /// `names` must exist in both stores with the same shape.
    pub fn copy_params_from(&mut self, other: &ParamStore, names: &[String]) -> Result<()> {
        for n in names {
            let src = other.id(n).ok_or_else(|| Error::InvalidCheckpoint(format!("missing parameter {n}")))?;
            let dst = self.params.id(n).ok_or_else(|| Error::InvalidCheckpoint(format!("unknown parameter {n}")))?;
            let value = other.get(src);
            if value.shape() != self.params.get(dst).shape() {
                return Err(Error::InvalidCheckpoint(format!(
                    "parameter {n}: shape {:?} vs {:?}",
                    value.shape(),
                    self.params.get(dst).shape()
                )));
            }
            *self.params.get_mut(dst) = value.clone();
        }
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 {
            return Err(Error::invalid(format!("network input must be [B, M, H, W, T], got {shape:?}")));
        }
        if shape[1] != self.cfg.in_channels {
            return Err(Error::Config(format!(
                "input has {} channels, network expects {}",
                shape[1], self.cfg.in_channels
            )));
        }
        if shape[2..].iter().any(|d| *d == 0 || d % DIM_DIVISOR != 0) {
            return Err(Error::invalid(format!(
                "spatial dims {:?} must be positive multiples of {DIM_DIVISOR}",
                &shape[2..]
            )));
        }
        Ok(())
    }

    fn p(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(&self.params, id)
    }

    fn conv(&self, g: &mut Graph, x: Var, c: Conv, geom: ConvGeom) -> Var {
        let (w, b) = (self.p(g, c.w), self.p(g, c.b));
        g.conv3d(x, w, Some(b), geom)
    }

    fn norm_act(&self, g: &mut Graph, x: Var, n: Norm) -> Var {
        let s = g.shape(x);
        let c = s[1];
        let vox: usize = s[2..].iter().product();
        let groups = if vox >= MIN_NORM_VOXELS { norm_groups(c) } else { 1 };
        let (gm, bt) = (self.p(g, n.g), self.p(g, n.b));
        let y = g.group_norm(x, gm, bt, groups);
        g.leaky_relu(y, LEAKY_SLOPE)
    }

    fn block(&self, g: &mut Graph, x: Var, b: Block, first: ConvGeom) -> Var {
        let y = self.conv(g, x, b.conv1, first);
        let y = self.norm_act(g, y, b.norm1);
        let y = self.conv(g, y, b.conv2, ConvGeom::same(3, 1));
        self.norm_act(g, y, b.norm2)
    }

    fn aspp(&self, g: &mut Graph, x: Var) -> Var {
        let mut cat: Option<Var> = None;
        for ((conv, norm), &d) in self.aspp.branches.iter().zip(&self.cfg.aspp_dilations) {
            let y = self.conv(g, x, *conv, ConvGeom::same(3, d));
            let y = self.norm_act(g, y, *norm);
            cat = Some(match cat {
                None => y,
                Some(c) => g.concat(c, y),
            });
        }
        let y = self.conv(g, cat.unwrap(), self.aspp.proj, ConvGeom::pointwise());
        self.norm_act(g, y, self.aspp.norm)
    }

    fn level_geom(&self, g: &Graph, prev: Var, level: usize) -> ConvGeom {
        if level == 0 {
            ConvGeom::same(3, 1)
        } else {
            let s = g.shape(prev);
            ConvGeom::down([s[2], s[3], s[4]])
        }
    }

    /// Encoder level `level` (0-based) applied to the previous feature (or
    /// the input); level 5 includes the ASPP bottleneck.
    fn encoder_level(&self, g: &mut Graph, prev: Var, level: usize) -> Var {
        let geom = self.level_geom(g, prev, level);
        let y = self.block(g, prev, self.enc[level], geom);
        if level == LEVELS - 1 {
            self.aspp(g, y)
        } else {
            y
        }
    }

    /// Plain encoder pass; `x: [B, M, H, W, T]`.
    pub fn encode_graph(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        self.check_input(g.shape(x))?;
        let mut feats = Vec::with_capacity(LEVELS);
        let mut prev = x;
        for i in 0..LEVELS {
            prev = self.encoder_level(g, prev, i);
            feats.push(prev);
        }
        Ok(feats)
    }

    /// Encoder pass with the adapter stack: each level's encoder output is
    /// corrected by its adapter before being passed to the next level.
    pub fn encode_adapted_graph(&self, g: &mut Graph, x: Var) -> Result<AdaptedPass> {
        self.check_input(g.shape(x))?;
        if self.adapters.is_empty() {
            return Err(Error::Config("network was built without adapters".into()));
        }
        let mut pass = AdaptedPass {
            features: Vec::with_capacity(LEVELS),
            encoder: Vec::with_capacity(LEVELS),
            attention: Vec::with_capacity(LEVELS),
        };
        let mut prev = x;
        for i in 0..LEVELS {
            let geom = self.level_geom(g, prev, i);
            let cp = self.encoder_level(g, prev, i);
            let (fh, att) = self.adapter(g, prev, cp, i, geom)?;
            let out = g.add(fh, cp);
            pass.encoder.push(cp);
            pass.features.push(out);
            pass.attention.push(att);
            prev = out;
        }
        Ok(pass)
    }

    /// Adapter `level`: returns `F_ada` and the mutual attention map.
    fn adapter(&self, g: &mut Graph, prev: Var, cp: Var, level: usize, geom: ConvGeom) -> Result<(Var, Option<Var>)> {
        let a = self.adapters[level];
        let c = self.cfg.width(level);
        if g.shape(cp)[1] != c {
            return Err(Error::Config(format!("adapter level {} expects {c} channels", level + 1)));
        }
        let inp = self.conv(g, prev, a.proj, geom);
        let red = self.conv(g, cp, a.reduce, ConvGeom::pointwise());
        let fused = g.add(inp, red);
        let fused = self.conv(g, fused, a.fuse, ConvGeom::same(3, 1));
        let fused = g.leaky_relu(fused, LEAKY_SLOPE);
        let fh = self.conv(g, fused, a.out, ConvGeom::pointwise());
        match a.gate {
            Gate::None => Ok((fh, None)),
            Gate::Conv(conv) => {
                let y = self.conv(g, fh, conv, ConvGeom::pointwise());
                let y = g.add(fh, y);
                let att = g.channel_seq_mean(y);
                let att = g.sigmoid(att);
                let rev = g.affine(att, -1.0, 1.0);
                Ok((g.mul_map(fh, rev), Some(att)))
            }
            Gate::Attention(at) => {
                let y = self.window_attention(g, fh, at)?;
                let att = g.channel_seq_mean(y);
                let att = g.sigmoid(att);
                let gate =
                    if self.cfg.adapter_variant == AdapterVariant::NoReverse { att } else { g.affine(att, -1.0, 1.0) };
                Ok((g.mul_map(fh, gate), Some(att)))
            }
        }
    }

    /// Adapter `level` (0-based) on its own: `prev` is the level input
    /// (the network input for level 1) and `cp` the encoder output at this
    /// level. Returns `F_ada` and the mutual attention map.
    pub fn adapter_graph(&self, g: &mut Graph, level: usize, prev: Var, cp: Var) -> Result<(Var, Option<Var>)> {
        if level >= self.adapters.len() {
            return Err(Error::Config(format!("no adapter at level {}", level + 1)));
        }
        let geom = self.level_geom(g, prev, level);
        self.adapter(g, prev, cp, level, geom)
    }

    /// Effective attention window for a level of spatial size `dims`.
    pub fn window_for(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        let mut w = [0; 3];
        for a in 0..3 {
            w[a] = self.cfg.attention_window[a].min(dims[a]);
            if dims[a] % w[a] != 0 {
                return Err(Error::Config(format!(
                    "attention window {:?} does not tile level dims {dims:?}",
                    self.cfg.attention_window
                )));
            }
        }
        Ok(w)
    }

    /// Windowed self-attention block with pre-norm and an MLP, applied to
    /// `x: [B, C, H, W, T]`; output has the same shape.
    fn window_attention(&self, g: &mut Graph, x: Var, at: Attention) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, c, dims) = (s[0], s[1], [s[2], s[3], s[4]]);
        let win = self.window_for(dims)?;
        let n = [dims[0] / win[0], dims[1] / win[1], dims[2] / win[2]];
        let len = win[0] * win[1] * win[2];
        let nwin = n[0] * n[1] * n[2];
        let y = g.permute(x, &[0, 2, 3, 4, 1]);
        let y = g.reshape(y, &[b, n[0], win[0], n[1], win[1], n[2], win[2], c]);
        let y = g.permute(y, &[0, 1, 3, 5, 2, 4, 6, 7]);
        let tokens = g.reshape(y, &[b * nwin, len, c]);
        let out = self.attention_tokens(g, tokens, at);
        let y = g.reshape(out, &[b, n[0], n[1], n[2], win[0], win[1], win[2], c]);
        let y = g.permute(y, &[0, 1, 4, 2, 5, 3, 6, 7]);
        let y = g.reshape(y, &[b, dims[0], dims[1], dims[2], c]);
        Ok(g.permute(y, &[0, 4, 1, 2, 3]))
    }

    /// Transformer block over `tokens: [G, L, C]`, attending within each
    /// group of `L` tokens.
    fn attention_tokens(&self, g: &mut Graph, tokens: Var, at: Attention) -> Var {
        let s = g.shape(tokens).to_vec();
        let (grp, len, c) = (s[0], s[1], s[2]);
        let lin = |g: &mut Graph, x: Var, l: Linear| {
            let (w, b) = (g.param(&self.params, l.w), g.param(&self.params, l.b));
            g.linear(x, w, Some(b))
        };
        let (g1, b1) = (self.p(g, at.ln1.g), self.p(g, at.ln1.b));
        let h = g.layer_norm(tokens, g1, b1);
        let q = lin(g, h, at.q);
        let k = lin(g, h, at.k);
        let v = lin(g, h, at.v);
        let r = g.shape(q)[2];
        let heads = at.heads;
        let dh = r / heads;
        let split = |g: &mut Graph, t: Var| {
            if heads == 1 {
                return t;
            }
            let t = g.reshape(t, &[grp, len, heads, dh]);
            let t = g.permute(t, &[0, 2, 1, 3]);
            g.reshape(t, &[grp * heads, len, dh])
        };
        let (q, k, v) = (split(g, q), split(g, k), split(g, v));
        let scores = g.batch_matmul(q, k, true);
        let scores = g.scale(scores, 1.0 / libm::sqrt(dh as f64));
        let att = g.softmax(scores);
        let o = g.batch_matmul(att, v, false);
        let o = if heads == 1 {
            o
        } else {
            let o = g.reshape(o, &[grp, heads, len, dh]);
            let o = g.permute(o, &[0, 2, 1, 3]);
            g.reshape(o, &[grp, len, r])
        };
        let o = lin(g, o, at.proj);
        let y = g.add(tokens, o);
        let (g2, b2) = (self.p(g, at.ln2.g), self.p(g, at.ln2.b));
        let h = g.layer_norm(y, g2, b2);
        let h = lin(g, h, at.mlp1);
        let h = g.gelu(h);
        let h = lin(g, h, at.mlp2);
        debug_assert_eq!(g.shape(h)[2], c);
        g.add(y, h)
    }

    /// Runs level `level`'s attention block on raw tokens `[G, L, C_level]`.
    pub fn attention_block_graph(&self, g: &mut Graph, level: usize, tokens: Var) -> Result<Var> {
        match self.adapters.get(level).map(|a| a.gate) {
            Some(Gate::Attention(at)) => Ok(self.attention_tokens(g, tokens, at)),
            _ => Err(Error::Config(format!("level {} has no attention block", level + 1))),
        }
    }

    /// Shared decoder body: returns the full-resolution `[B, C_1, ...]`
    /// feature.
    pub fn decode_body_graph(&self, g: &mut Graph, pyramid: &[Var]) -> Result<Var> {
        if pyramid.len() != LEVELS {
            return Err(Error::invalid(format!("pyramid needs {LEVELS} levels, got {}", pyramid.len())));
        }
        for (i, f) in pyramid.iter().enumerate() {
            if g.shape(*f)[1] != self.cfg.width(i) {
                return Err(Error::shape(&[self.cfg.width(i)], &g.shape(*f)[1..2]));
            }
        }
        let mut y = pyramid[LEVELS - 1];
        for (j, lvl) in self.dec.iter().enumerate() {
            let skip = pyramid[LEVELS - 2 - j];
            let ss = g.shape(skip);
            let target = [ss[2], ss[3], ss[4]];
            let (w, b) = (self.p(g, lvl.up.w), self.p(g, lvl.up.b));
            let up = g.conv_transpose_up(y, w, Some(b), target);
            let cat = g.concat(up, skip);
            y = self.block(g, cat, lvl.block, ConvGeom::same(3, 1));
        }
        Ok(y)
    }

    /// Per-region probabilities `[B, N, H, W, T]`.
    pub fn seg_head_graph(&self, g: &mut Graph, body: Var) -> Var {
        let y = self.conv(g, body, self.seg_head, ConvGeom::pointwise());
        g.sigmoid(y)
    }

    /// Non-negative reconstruction `[B, M, H, W, T]`.
    pub fn recon_head_graph(&self, g: &mut Graph, body: Var) -> Var {
        let y = self.conv(g, body, self.recon_head, ConvGeom::pointwise());
        g.relu(y)
    }

    pub fn decode_seg_graph(&self, g: &mut Graph, pyramid: &[Var]) -> Result<Var> {
        let body = self.decode_body_graph(g, pyramid)?;
        Ok(self.seg_head_graph(g, body))
    }

    pub fn decode_recon_graph(&self, g: &mut Graph, pyramid: &[Var]) -> Result<Var> {
        let body = self.decode_body_graph(g, pyramid)?;
        Ok(self.recon_head_graph(g, body))
    }

    /// Per-level `[B, C_i]` descriptors.
    pub fn pool_graph(g: &mut Graph, pyramid: &[Var]) -> Vec<Var> {
        pyramid.iter().map(|f| g.global_avg_pool(*f)).collect()
    }

    fn batched(&self, x: &Tensor) -> Result<Tensor> {
        match x.ndim() {
            4 => {
                let mut s = vec![1];
                s.extend_from_slice(x.shape());
                x.clone().reshape(&s)
            }
            5 => Ok(x.clone()),
            _ => Err(Error::invalid(format!("expected [M,H,W,T] or [B,M,H,W,T], got {:?}", x.shape()))),
        }
    }

    fn pyramid_from(g: &Graph, vars: &[Var]) -> Result<FeaturePyramid> {
        FeaturePyramid::new(vars.iter().map(|v| g.value(*v).clone()).collect())
    }

    /// Encoder features for `x: [M,H,W,T]` or `[B,M,H,W,T]`.
    pub fn encode(&self, x: &Tensor) -> Result<FeaturePyramid> {
        let mut g = Graph::new();
        let xv = g.input(self.batched(x)?);
        let f = self.encode_graph(&mut g, xv)?;
        Self::pyramid_from(&g, &f)
    }

    pub fn encode_with_adapters(&self, x: &Tensor) -> Result<FeaturePyramid> {
        let mut g = Graph::new();
        let xv = g.input(self.batched(x)?);
        let p = self.encode_adapted_graph(&mut g, xv)?;
        Self::pyramid_from(&g, &p.features)
    }

    fn decode_with(&self, pyramid: &FeaturePyramid, seg: bool) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pyramid.features.iter().map(|f| g.input(f.clone())).collect();
        let body = self.decode_body_graph(&mut g, &vars)?;
        let out = if seg { self.seg_head_graph(&mut g, body) } else { self.recon_head_graph(&mut g, body) };
        Ok(g.value(out).clone())
    }

    /// `[B, N, H, W, T]` probabilities.
    pub fn decode_seg(&self, pyramid: &FeaturePyramid) -> Result<Tensor> {
        self.decode_with(pyramid, true)
    }

    /// `[B, M, H, W, T]` non-negative reconstruction.
    pub fn decode_recon(&self, pyramid: &FeaturePyramid) -> Result<Tensor> {
        self.decode_with(pyramid, false)
    }

    /// Spatial-and-sequence mean of every level, `[B, C_i]` each.
    pub fn pool_descriptors(pyramid: &FeaturePyramid) -> Vec<Tensor> {
        pyramid.clone().with_pooled().pooled.unwrap()
    }

    /// Segmentation of `x` via the chosen encoder route; returns
    /// `[B, N, H, W, T]` probabilities.
    pub fn segment(&self, x: &Tensor, route: Route) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input(self.batched(x)?);
        let feats = match route {
            Route::Plain => self.encode_graph(&mut g, xv)?,
            Route::Adapted => self.encode_adapted_graph(&mut g, xv)?.features,
        };
        let out = self.decode_seg_graph(&mut g, &feats)?;
        Ok(g.value(out).clone())
    }

    /// Mutual attention maps `a^i` for `x`, one `[B, 1, H_i, W_i, 1]`
    /// tensor per level.
    pub fn attention_maps(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let xv = g.input(self.batched(x)?);
        let p = self.encode_adapted_graph(&mut g, xv)?;
        p.attention
            .iter()
            .map(|a| {
                a.map(|v| g.value(v).clone())
                    .ok_or_else(|| Error::Config("adapter variant computes no attention map".into()))
            })
            .collect()
    }

    /// Parameter counts `(encoder, adapters)`.
    pub fn param_counts(&self) -> (usize, usize) {
        (self.params.count(ENCODER_PREFIX), self.params.count(ADAPTER_PREFIX))
    }

    /// Names of every parameter outside the output heads.
    pub fn transferable_names(&self) -> Vec<String> {
        self.params.entries().iter().filter(|e| !e.name.starts_with(HEAD_PREFIX)).map(|e| e.name.clone()).collect()
    }
}

fn head_conv(init: &mut Init<'_>, name: &str, cin: usize, cout: usize) -> Conv {
    let std = libm::sqrt(1.0 / cin as f64);
    Conv {
        w: init.normal(&format!("{name}.w"), &[cout, cin, 1, 1, 1], std),
        b: init.constant(&format!("{name}.b"), &[cout], 0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_groups_divide_and_pair_channels() {
        for c in 1..=96 {
            let g = norm_groups(c);
            assert_eq!(c % g, 0);
            assert!(g <= MAX_NORM_GROUPS && (c < 2 || c / g >= 2), "{c} -> {g}");
        }
        assert_eq!(norm_groups(8), 4);
        assert_eq!(norm_groups(256), 8);
    }

    fn small() -> NetworkConfig {
        NetworkConfig { base_channels: 4, ..NetworkConfig::default() }
    }

    #[test]
    fn rejects_invalid_configs() {
        assert!(NetworkConfig { levels: 4, ..small() }.validate().is_err());
        assert!(NetworkConfig { aspp_dilations: [1, 2, 3, 4], ..small() }.validate().is_err());
        assert!(NetworkConfig { base_channels: 6, ..small() }.validate().is_err());
    }

    #[test]
    fn hash_tracks_architecture() {
        let a = small();
        let mut b = small();
        assert_eq!(a.hash(), b.hash());
        b.adapter_variant = AdapterVariant::NoReverse;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn non_divisible_dims_rejected() {
        let net = Network::new(small(), 0).unwrap();
        assert!(net.encode(&Tensor::zeros(&[4, 16, 16, 8])).is_err());
        assert!(net.encode(&Tensor::zeros(&[3, 16, 16, 16])).is_err());
    }

    #[test]
    fn construction_is_deterministic() {
        let a = Network::new(small(), 5).unwrap();
        let b = Network::new(small(), 5).unwrap();
        let c = Network::new(small(), 6).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params().fingerprint(""), c.params().fingerprint(""));
    }
}
