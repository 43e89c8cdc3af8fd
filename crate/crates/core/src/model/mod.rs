//! The network: patch tokenizer, Plücker ray embedding, interleaved frame and
//! global attention blocks, camera head, and the RGB and point-map decoders.
//!
//! Parameters live in one flat buffer described by [`ParamSpec`]s so that the
//! optimizer, checkpoints and gradient checks can treat them uniformly.
//! Every layer has a hand-written backward pass; gradients share the
//! parameter layout.

pub mod nn;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{
    grouped_attention, grouped_attention_backward, query_with_cache, AttentionKind, AttnGroup, Fnv64,
    GroupedAttentionCache, MaskMode, SceneCache, TokenLayout,
};
use crate::error::{Error, Result};
use crate::geometry::{plucker_map, CameraPose, Intrinsics};
use crate::linalg::{Mat3, Vec3};
use crate::real::Real;
use nn::{gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, LnCache, UpConv};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    /// Number of (frame, global) block pairs.
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Patch size in pixels; a power of two.
    pub patch: usize,
    pub registers: usize,
    /// Square image side in pixels.
    pub resolution: usize,
    /// Decoder widths: token-grid projection, then one per upsampling stage.
    pub head_channels: Vec<usize>,
    pub camera_hidden: usize,
    /// Source views expected by the service.
    pub sources: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            dim: 128,
            heads: 4,
            mlp_ratio: 4,
            patch: 8,
            registers: 4,
            resolution: 64,
            head_channels: vec![64, 32, 16, 16],
            camera_hidden: 128,
            sources: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigMismatch(m));
        if self.layers == 0 {
            return bad("layers must be >= 1".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.dim % 4 != 0 {
            return bad("dim must be a multiple of 4 for the 2D positional encoding".into());
        }
        if self.patch < 2 || !self.patch.is_power_of_two() {
            return bad(format!("patch {} must be a power of two >= 2", self.patch));
        }
        if self.resolution == 0 || self.resolution % self.patch != 0 {
            return bad(format!("resolution {} not divisible by patch {}", self.resolution, self.patch));
        }
        if self.head_channels.len() != self.decoder_stages() + 1 || self.head_channels.contains(&0) {
            return bad(format!("need {} positive head channel widths", self.decoder_stages() + 1));
        }
        if self.mlp_ratio == 0 || self.camera_hidden == 0 || self.sources == 0 {
            return bad("mlp_ratio, camera_hidden and sources must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.resolution / self.patch
    }

    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn tokens_per_view(&self) -> usize {
        1 + self.registers + self.patches()
    }

    pub fn decoder_stages(&self) -> usize {
        self.patch.trailing_zeros() as usize
    }

    pub fn hidden(&self) -> usize {
        self.mlp_ratio * self.dim
    }

    pub fn pixels(&self) -> usize {
        self.resolution * self.resolution
    }

    /// Matmul and attention flops of a forward pass with `n_sources` source
    /// views and `n_targets` target views. With `include_sources` false, only
    /// the target-side work of a cached query is counted.
    pub fn analytic_flops(&self, n_sources: usize, n_targets: usize, include_sources: bool) -> FlopCount {
        let d = self.dim as u64;
        let tpv = self.tokens_per_view() as u64;
        let p = self.patches() as u64;
        let ps2 = (self.patch * self.patch) as u64;
        let s = n_sources as u64;
        let per_token = 2 * d * 3 * d + 2 * d * d + 4 * d * self.hidden() as u64;
        let layers = self.layers as u64;
        let mut f = FlopCount::default();
        if include_sources {
            let src_tokens = s * tpv;
            f.source += s * p * 2 * 3 * ps2 * d;
            f.source += layers * src_tokens * 2 * per_token;
            f.source += layers * (4 * src_tokens * tpv * d + 4 * src_tokens * src_tokens * d);
            f.source += s * 2 * (d * self.camera_hidden as u64 + self.camera_hidden as u64 * 9);
        }
        let t = n_targets as u64;
        f.target += t * p * 2 * 6 * ps2 * d;
        f.target += layers * t * tpv * 2 * per_token;
        f.target += layers * t * (4 * tpv * tpv * d + 4 * tpv * (s * tpv + tpv) * d);
        f.target += t * (self.head_flops(3) + self.head_flops(4));
        f
    }

    fn head_flops(&self, out_channels: usize) -> u64 {
        let ch = &self.head_channels;
        let mut f = 2 * (self.patches() * self.dim * ch[0]) as u64;
        let mut side = self.grid();
        for i in 0..self.decoder_stages() {
            side *= 2;
            f += 2 * (side * side * 9 * ch[i] * ch[i + 1]) as u64;
        }
        f + 2 * (self.pixels() * ch[ch.len() - 1] * out_channels) as u64
    }
}

/// Flops split by the side of the source/target boundary they serve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FlopCount {
    pub source: u64,
    pub target: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.source + self.target
    }

    fn rows(&mut self, src_rows: usize, total_rows: usize, per_row: u64) {
        self.source += src_rows as u64 * per_row;
        self.target += (total_rows - src_rows) as u64 * per_row;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Weight matrix (`din x dout`) immediately followed by its bias.
#[derive(Debug, Clone, Copy)]
struct Lin {
    off: usize,
    din: usize,
    dout: usize,
}

impl Lin {
    fn range(&self) -> Range<usize> {
        self.off..self.off + self.din * self.dout + self.dout
    }
}

/// Gamma immediately followed by beta.
#[derive(Debug, Clone, Copy)]
struct Norm {
    off: usize,
    d: usize,
}

impl Norm {
    fn range(&self) -> Range<usize> {
        self.off..self.off + 2 * self.d
    }
}

#[derive(Debug, Clone, Copy)]
struct SubLayer {
    norm1: Norm,
    qkv: Lin,
    proj: Lin,
    norm2: Norm,
    fc1: Lin,
    fc2: Lin,
}

#[derive(Debug, Clone)]
struct HeadLayout {
    proj: Lin,
    convs: Vec<(UpConv, Lin)>,
    out: Lin,
}

#[derive(Debug, Clone)]
struct Offsets {
    patch: Lin,
    ray: Lin,
    /// `[special, shared]`.
    camera: [usize; 2],
    registers: [usize; 2],
    layers: Vec<[SubLayer; 2]>,
    norm: Norm,
    cam_fc1: Lin,
    cam_fc2: Lin,
    rgb: HeadLayout,
    point: HeadLayout,
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
    Values(Vec<f64>),
}

#[derive(Default)]
struct Builder {
    specs: Vec<ParamSpec>,
    inits: Vec<Init>,
    len: usize,
}

impl Builder {
    fn tensor(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let off = self.len;
        let spec = ParamSpec { name, shape: shape.to_vec(), offset: off };
        self.len += spec.len();
        self.specs.push(spec);
        self.inits.push(init);
        off
    }

    fn lin(&mut self, name: &str, din: usize, dout: usize, std: f64, bias: Init) -> Lin {
        let off = self.tensor(format!("{name}.weight"), &[din, dout], Init::Normal(std));
        self.tensor(format!("{name}.bias"), &[dout], bias);
        Lin { off, din, dout }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        let off = self.tensor(format!("{name}.weight"), &[d], Init::Ones);
        self.tensor(format!("{name}.bias"), &[d], Init::Zeros);
        Norm { off, d }
    }

    fn head(&mut self, name: &str, cfg: &ModelConfig, out_channels: usize) -> HeadLayout {
        let ch = &cfg.head_channels;
        let proj = self.lin(&format!("{name}.proj"), cfg.dim, ch[0], 1.0 / sqrt(cfg.dim as f64), Init::Zeros);
        let mut side = cfg.grid();
        let mut convs = Vec::new();
        for i in 0..cfg.decoder_stages() {
            let uc = UpConv { h: side, w: side, cin: ch[i], cout: ch[i + 1] };
            let lin = self.lin(&format!("{name}.conv{i}"), uc.col_width(), uc.cout, sqrt(2.0 / uc.col_width() as f64), Init::Zeros);
            convs.push((uc, lin));
            side *= 2;
        }
        let last = ch[ch.len() - 1];
        let out = self.lin(&format!("{name}.out"), last, out_channels, 0.1 / sqrt(last as f64), Init::Zeros);
        HeadLayout { proj, convs, out }
    }
}

fn sqrt(x: f64) -> f64 {
    num_traits::Float::sqrt(x)
}

#[derive(Debug, Clone)]
struct ParamLayout {
    specs: Vec<ParamSpec>,
    offsets: Offsets,
    len: usize,
}

/// Camera-head bias: identity 6D rotation and the canonical center.
const CAMERA_BIAS: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0];

fn build_layout(cfg: &ModelConfig) -> (ParamLayout, Vec<Init>) {
    let d = cfg.dim;
    let ps2 = cfg.patch * cfg.patch;
    let mut b = Builder::default();
    let patch = b.lin("patch_embed", 3 * ps2, d, 1.0 / sqrt((3 * ps2) as f64), Init::Zeros);
    let ray = b.lin("ray_embed", 6 * ps2, d, 1.0 / sqrt((6 * ps2) as f64), Init::Zeros);
    let camera = [
        b.tensor("tokens.camera_special".into(), &[d], Init::Normal(0.5)),
        b.tensor("tokens.camera_shared".into(), &[d], Init::Normal(0.5)),
    ];
    let registers = [
        b.tensor("tokens.register_special".into(), &[cfg.registers, d], Init::Normal(0.5)),
        b.tensor("tokens.register_shared".into(), &[cfg.registers, d], Init::Normal(0.5)),
    ];
    let residual_std = 1.0 / sqrt((4 * cfg.layers) as f64);
    let mut layers = Vec::new();
    for l in 0..cfg.layers {
        let mut sub = |kind: &str| {
            let p = format!("blocks.{l}.{kind}");
            SubLayer {
                norm1: b.norm(&format!("{p}.norm1"), d),
                qkv: b.lin(&format!("{p}.attn.qkv"), d, 3 * d, 1.0 / sqrt(d as f64), Init::Zeros),
                proj: b.lin(&format!("{p}.attn.proj"), d, d, residual_std / sqrt(d as f64), Init::Zeros),
                norm2: b.norm(&format!("{p}.norm2"), d),
                fc1: b.lin(&format!("{p}.mlp.fc1"), d, cfg.hidden(), 1.0 / sqrt(d as f64), Init::Zeros),
                fc2: b.lin(&format!("{p}.mlp.fc2"), cfg.hidden(), d, residual_std / sqrt(cfg.hidden() as f64), Init::Zeros),
            }
        };
        let frame = sub("frame");
        let global = sub("global");
        layers.push([frame, global]);
    }
    let norm = b.norm("norm", d);
    let cam_fc1 = b.lin("camera_head.fc1", d, cfg.camera_hidden, 1.0 / sqrt(d as f64), Init::Zeros);
    let cam_fc2 = b.lin("camera_head.fc2", cfg.camera_hidden, 9, 0.01 / sqrt(cfg.camera_hidden as f64), Init::Values(CAMERA_BIAS.to_vec()));
    let rgb = b.head("rgb_head", cfg, 3);
    let point = b.head("point_head", cfg, 4);
    let offsets = Offsets { patch, ray, camera, registers, layers, norm, cam_fc1, cam_fc2, rgb, point };
    (ParamLayout { specs: b.specs, offsets, len: b.len }, b.inits)
}

/// Confidence clamp range for the exponential activation.
pub const CONF_CLAMP: f64 = 8.0;

/// The RGB sigmoid is stretched to `(-m, 1 + m)` so that the white
/// background is reached at a finite logit. Losses see the stretched value;
/// [`TargetMaps::rgb_unit`] clamps it for images and metrics. A clamp inside
/// the model leaves saturated background pixels without gradient and the
/// head drifts to a constant white image.
pub const RGB_MARGIN: f64 = 0.05;

fn rgb_activation<T: Real>(x: T) -> T {
    let m = T::c(RGB_MARGIN);
    (T::one() + m + m) * sigmoid(x) - m
}

fn rgb_activation_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    T::c(1.0 + 2.0 * RGB_MARGIN) * s * (T::one() - s)
}

/// Per-target decoder outputs, row-major `H x W x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps<T> {
    pub width: usize,
    pub height: usize,
    /// In `(-RGB_MARGIN, 1 + RGB_MARGIN)`.
    pub rgb: Vec<T>,
    pub pointmap: Vec<T>,
    /// Strictly positive.
    pub confidence: Vec<T>,
}

impl<T: Real> TargetMaps<T> {
    /// RGB clamped to `[0, 1]`.
    pub fn rgb_unit(&self) -> Vec<T> {
        self.rgb.iter().map(|c| c.max(T::zero()).min(T::one())).collect()
    }
}

#[derive(Debug, Clone)]
pub struct MultiOutputs<T> {
    pub poses: Vec<CameraPose>,
    /// Raw camera-head outputs: 6D rotation then center.
    pub raw_poses: Vec<[T; 9]>,
    pub targets: Vec<TargetMaps<T>>,
    /// Final normalised trunk tokens, `layout.len() x dim`.
    pub tokens: Vec<T>,
    pub layout: TokenLayout,
    pub flops: FlopCount,
}

/// Outputs of a joint forward with a single target view.
#[derive(Debug, Clone)]
pub struct ModelOutputs<T> {
    pub poses: Vec<CameraPose>,
    pub raw_poses: Vec<[T; 9]>,
    pub target: TargetMaps<T>,
    pub tokens: Vec<T>,
    pub layout: TokenLayout,
    pub flops: FlopCount,
}

#[derive(Debug, Clone)]
pub struct Stage1Output<T> {
    pub cache: SceneCache<T>,
    pub poses: Vec<CameraPose>,
    pub raw_poses: Vec<[T; 9]>,
    pub flops: FlopCount,
}

/// Loss gradients with respect to the model outputs.
#[derive(Debug, Clone)]
pub struct OutputGrads<T> {
    pub raw_poses: Vec<[T; 9]>,
    pub targets: Vec<TargetGrads<T>>,
}

#[derive(Debug, Clone)]
pub struct TargetGrads<T> {
    pub rgb: Vec<T>,
    pub pointmap: Vec<T>,
    pub confidence: Vec<T>,
}

impl<T: Real> TargetGrads<T> {
    pub fn zeros(pixels: usize) -> Self {
        TargetGrads { rgb: vec![T::zero(); 3 * pixels], pointmap: vec![T::zero(); 3 * pixels], confidence: vec![T::zero(); pixels] }
    }
}

#[derive(Debug, Clone, Default)]
struct SubTape<T> {
    ln1: LnCache<T>,
    a_in: Vec<T>,
    qkv: Vec<T>,
    attn: GroupedAttentionCache<T>,
    heads: Vec<T>,
    ln2: LnCache<T>,
    m_in: Vec<T>,
    h_pre: Vec<T>,
    h_act: Vec<T>,
}

#[derive(Debug, Clone, Default)]
struct HeadTape<T> {
    input: Vec<T>,
    grid: Vec<T>,
    cols: Vec<Vec<T>>,
    outs: Vec<Vec<T>>,
    raw: Vec<T>,
}

/// Activations recorded by a training forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    layout: Option<TokenLayout>,
    src_patches: Vec<T>,
    tgt_rays: Vec<T>,
    subs: Vec<SubTape<T>>,
    final_ln: LnCache<T>,
    cam_in: Vec<T>,
    cam_pre: Vec<T>,
    cam_act: Vec<T>,
    heads: Vec<[HeadTape<T>; 2]>,
}

enum Mixer<'a, T> {
    Groups(&'a [AttnGroup]),
    Cached { cache: &'a SceneCache<T>, block: usize, views: &'a [Range<usize>], fingerprint: u64 },
}

/// Orthonormal frame from a 6D rotation (two 3-vectors) by Gram-Schmidt.
/// Collinear or vanishing inputs fall back to the nearest valid frame by
/// cross-product completion.
pub fn rotation_from_6d(a: [f64; 6]) -> Mat3 {
    let a1 = Vec3::new(a[0], a[1], a[2]);
    let a2 = Vec3::new(a[3], a[4], a[5]);
    let b1 = a1.try_normalize().unwrap_or(Vec3::X);
    let u2 = a2 - b1 * b1.dot(a2);
    let b2 = match u2.try_normalize() {
        Some(v) if u2.norm() > 1e-9 * a2.norm().max(1.0) => v,
        _ => {
            let mut axis = Vec3::X;
            for cand in [Vec3::Y, Vec3::Z] {
                if b1.dot(cand).abs() < b1.dot(axis).abs() {
                    axis = cand;
                }
            }
            (axis - b1 * b1.dot(axis)).normalize()
        }
    };
    Mat3::from_cols(b1, b2, b1.cross(b2))
}

/// The 6D rotation parameters of a rotation matrix (its first two columns).
pub fn rotation_to_6d(r: Mat3) -> [f64; 6] {
    let (c0, c1) = (r.col(0), r.col(1));
    [c0[0], c0[1], c0[2], c1[0], c1[1], c1[2]]
}

pub fn pose_from_raw<T: Real>(raw: &[T; 9], intrinsics: Intrinsics) -> CameraPose {
    let r = rotation_from_6d(core::array::from_fn(|i| raw[i].f64()));
    let c = Vec3::new(raw[6].f64(), raw[7].f64(), raw[8].f64());
    CameraPose::new(r, c, intrinsics)
}

/// The raw 9-vector whose decoded pose equals `pose`.
pub fn pose_to_raw(pose: &CameraPose) -> [f64; 9] {
    let r6 = rotation_to_6d(pose.rotation);
    [r6[0], r6[1], r6[2], r6[3], r6[4], r6[5], pose.center[0], pose.center[1], pose.center[2]]
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn gather<T: Real>(src: &[T], d: usize, rows: impl Iterator<Item = usize>) -> Vec<T> {
    let mut out = Vec::new();
    for r in rows {
        out.extend_from_slice(&src[r * d..(r + 1) * d]);
    }
    out
}

fn add_rows<T: Real>(dst: &mut [T], d: usize, rows: impl Iterator<Item = usize>, src: &[T]) {
    for (i, r) in rows.enumerate() {
        for (a, b) in dst[r * d..(r + 1) * d].iter_mut().zip(&src[i * d..(i + 1) * d]) {
            *a += *b;
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += *b;
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Real = f32> {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<T>,
    pe: Vec<T>,
}

impl<T: Real> Model<T> {
    /// Randomly initialised weights drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, inits) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::with_capacity(layout.len);
        for (spec, init) in layout.specs.iter().zip(&inits) {
            match init {
                Init::Normal(std) => {
                    for _ in 0..spec.len() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        params.push(T::c(z * std));
                    }
                }
                Init::Zeros => params.extend(core::iter::repeat_n(T::zero(), spec.len())),
                Init::Ones => params.extend(core::iter::repeat_n(T::one(), spec.len())),
                Init::Values(v) => params.extend(v.iter().map(|x| T::c(*x))),
            }
        }
        Ok(Self::assemble(config, layout, params))
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let (layout, _) = build_layout(&config);
        if params.len() != layout.len {
            return Err(Error::ConfigMismatch(format!("expected {} parameters, got {}", layout.len, params.len())));
        }
        Ok(Self::assemble(config, layout, params))
    }

    fn assemble(config: ModelConfig, layout: ParamLayout, params: Vec<T>) -> Self {
        let pe = nn::sincos_2d(config.grid(), config.grid(), config.dim).into_iter().map(T::c).collect();
        Model { config, layout, params, pe }
    }

    /// Parameter names, shapes and offsets for a config, without allocating
    /// weights.
    pub fn specs_for(config: &ModelConfig) -> Result<Vec<ParamSpec>> {
        config.validate()?;
        Ok(build_layout(config).0.specs)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.layout.specs
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout.specs.iter().find(|s| s.name == name).map(|s| &self.params[s.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let r = self.layout.specs.iter().find(|s| s.name == name)?.range();
        Some(&mut self.params[r])
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let params = self.params.iter().map(|x| U::c(x.f64())).collect();
        Model::assemble(self.config.clone(), self.layout.clone(), params)
    }

    /// Hash of the config and every weight.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        h.write(format!("{:?}", self.config).as_bytes());
        for x in &self.params {
            h.mix(x.f64().to_bits());
        }
        h.finish()
    }

    fn p(&self, r: Range<usize>) -> &[T] {
        &self.params[r]
    }

    fn check_images(&self, images: &[&[f32]]) -> Result<()> {
        if images.is_empty() {
            return Err(Error::invalid("at least one source image is required"));
        }
        let want = self.config.pixels() * 3;
        for (i, img) in images.iter().enumerate() {
            if img.len() != want {
                return Err(Error::shape(format!(
                    "source {i} has {} values, expected {}x{}x3",
                    img.len(),
                    self.config.resolution,
                    self.config.resolution
                )));
            }
        }
        Ok(())
    }

    fn check_target(&self, pose: &CameraPose) -> Result<()> {
        let k = pose.intrinsics;
        if k.width != self.config.resolution || k.height != self.config.resolution {
            return Err(Error::shape(format!("target camera is {}x{}, model expects {}", k.width, k.height, self.config.resolution)));
        }
        pose.validate()
    }

    /// Rearranges an `H x W x C` map into per-patch rows of `ps*ps*C` values.
    fn patchify(&self, src: &[f32], channels: usize, out: &mut Vec<T>) {
        let (ps, g, w) = (self.config.patch, self.config.grid(), self.config.resolution);
        for gy in 0..g {
            for gx in 0..g {
                for py in 0..ps {
                    let base = ((gy * ps + py) * w + gx * ps) * channels;
                    out.extend(src[base..base + ps * channels].iter().map(|v| T::c(*v as f64)));
                }
            }
        }
    }

    fn embed_view(&self, input: &[T], lin: Lin, slot: usize, out: &mut [T]) -> u64 {
        let (d, r, p) = (self.config.dim, self.config.registers, self.config.patches());
        let o = &self.layout.offsets;
        out[..d].copy_from_slice(self.p(o.camera[slot]..o.camera[slot] + d));
        out[d..(1 + r) * d].copy_from_slice(self.p(o.registers[slot]..o.registers[slot] + r * d));
        let toks = &mut out[(1 + r) * d..];
        let flops = linear(input, p, lin.din, d, self.p(lin.range()), toks);
        add_into(toks, &self.pe);
        flops
    }

    /// Source tokens (`camera, registers, patches` per view) and their layout.
    pub fn tokenize_sources(&self, images: &[&[f32]]) -> Result<(Vec<T>, TokenLayout)> {
        self.check_images(images)?;
        let tpv = self.config.tokens_per_view();
        let layout = TokenLayout::sources_then_targets(images.len(), 0, tpv, MaskMode::SingleTarget)?;
        let mut x = vec![T::zero(); layout.len() * self.config.dim];
        for (i, img) in images.iter().enumerate() {
            let mut patches = Vec::new();
            self.patchify(img, 3, &mut patches);
            let d = self.config.dim;
            self.embed_view(&patches, self.layout.offsets.patch, usize::from(i > 0), &mut x[i * tpv * d..(i + 1) * tpv * d]);
        }
        Ok((x, layout))
    }

    fn ray_patches(&self, pose: &CameraPose) -> Result<Vec<T>> {
        self.check_target(pose)?;
        let rays = plucker_map(pose)?.to_channels();
        let mut out = Vec::with_capacity(rays.len());
        self.patchify(&rays, 6, &mut out);
        Ok(out)
    }

    /// Target-view tokens from the Plücker rays of `pose`.
    pub fn embed_target(&self, pose: &CameraPose) -> Result<Vec<T>> {
        let rays = self.ray_patches(pose)?;
        let mut x = vec![T::zero(); self.config.tokens_per_view() * self.config.dim];
        self.embed_view(&rays, self.layout.offsets.ray, 1, &mut x);
        Ok(x)
    }

    #[allow(clippy::too_many_arguments)]
    fn sublayer(
        &self,
        sl: &SubLayer,
        x: &mut [T],
        n: usize,
        src_rows: usize,
        mixer: Mixer<'_, T>,
        tape: Option<&mut SubTape<T>>,
        kv_sink: Option<&mut SceneCache<T>>,
        flops: &mut FlopCount,
    ) -> Result<()> {
        let d = self.config.dim;
        let hd = self.config.hidden();
        let keep = tape.is_some();
        let mut ln1 = LnCache::default();
        let mut a_in = vec![T::zero(); n * d];
        layer_norm(x, n, d, self.p(sl.norm1.range()), &mut a_in, keep.then_some(&mut ln1));
        let mut qkv = vec![T::zero(); n * 3 * d];
        linear(&a_in, n, d, 3 * d, self.p(sl.qkv.range()), &mut qkv);
        flops.rows(src_rows, n, 2 * (d * 3 * d) as u64);
        if let Some(c) = kv_sink {
            let (mut k, mut v) = (Vec::with_capacity(n * d), Vec::with_capacity(n * d));
            for row in qkv.chunks(3 * d) {
                k.extend_from_slice(&row[d..2 * d]);
                v.extend_from_slice(&row[2 * d..]);
            }
            c.push_block(k, v)?;
        }
        let mut heads = vec![T::zero(); n * d];
        let mut attn_cache = GroupedAttentionCache::default();
        match mixer {
            Mixer::Groups(groups) => {
                grouped_attention(&qkv, d, self.config.heads, groups, &mut heads, keep.then_some(&mut attn_cache));
                for g in groups {
                    let f = 4 * (g.query_count() * g.key_count() * d) as u64;
                    if g.queries[0].start < src_rows {
                        flops.source += f;
                    } else {
                        flops.target += f;
                    }
                }
            }
            Mixer::Cached { cache, block, views, fingerprint } => {
                for r in views {
                    let (out, f) = query_with_cache(&qkv[r.start * 3 * d..r.end * 3 * d], cache, block, self.config.heads, fingerprint, None)?;
                    heads[r.start * d..r.end * d].copy_from_slice(&out);
                    flops.target += f;
                }
            }
        }
        let mut y = vec![T::zero(); n * d];
        linear(&heads, n, d, d, self.p(sl.proj.range()), &mut y);
        flops.rows(src_rows, n, 2 * (d * d) as u64);
        add_into(x, &y);

        let mut ln2 = LnCache::default();
        let mut m_in = vec![T::zero(); n * d];
        layer_norm(x, n, d, self.p(sl.norm2.range()), &mut m_in, keep.then_some(&mut ln2));
        let mut h_pre = vec![T::zero(); n * hd];
        linear(&m_in, n, d, hd, self.p(sl.fc1.range()), &mut h_pre);
        let h_act: Vec<T> = h_pre.iter().map(|v| gelu(*v)).collect();
        linear(&h_act, n, hd, d, self.p(sl.fc2.range()), &mut y);
        flops.rows(src_rows, n, 4 * (d * hd) as u64);
        add_into(x, &y);
        if let Some(t) = tape {
            *t = SubTape { ln1, a_in, qkv, attn: attn_cache, heads, ln2, m_in, h_pre, h_act };
        }
        Ok(())
    }

    fn sublayer_backward(&self, sl: &SubLayer, t: &SubTape<T>, n: usize, dx: &mut [T], dp: &mut [T]) {
        let d = self.config.dim;
        let hd = self.config.hidden();
        let mut dh = vec![T::zero(); n * hd];
        linear_backward(&t.h_act, n, hd, d, self.p(sl.fc2.range()), dx, Some(&mut dh), &mut dp[sl.fc2.range()]);
        for (g, h) in dh.iter_mut().zip(&t.h_pre) {
            *g *= gelu_grad(*h);
        }
        let mut dm = vec![T::zero(); n * d];
        linear_backward(&t.m_in, n, d, hd, self.p(sl.fc1.range()), &dh, Some(&mut dm), &mut dp[sl.fc1.range()]);
        layer_norm_backward(&t.ln2, n, d, self.p(sl.norm2.range()), &dm, dx, &mut dp[sl.norm2.range()]);

        let mut dheads = vec![T::zero(); n * d];
        linear_backward(&t.heads, n, d, d, self.p(sl.proj.range()), dx, Some(&mut dheads), &mut dp[sl.proj.range()]);
        let mut dqkv = vec![T::zero(); n * 3 * d];
        grouped_attention_backward(&t.qkv, d, self.config.heads, &t.attn, &dheads, &mut dqkv);
        let mut da = vec![T::zero(); n * d];
        linear_backward(&t.a_in, n, d, 3 * d, self.p(sl.qkv.range()), &dqkv, Some(&mut da), &mut dp[sl.qkv.range()]);
        layer_norm_backward(&t.ln1, n, d, self.p(sl.norm1.range()), &da, dx, &mut dp[sl.norm1.range()]);
    }

    fn camera_head(&self, cam_in: &[T], s: usize, tape: Option<&mut Tape<T>>, flops: &mut FlopCount) -> Vec<[T; 9]> {
        let o = &self.layout.offsets;
        let h = self.config.camera_hidden;
        let mut pre = vec![T::zero(); s * h];
        flops.source += linear(cam_in, s, self.config.dim, h, self.p(o.cam_fc1.range()), &mut pre);
        let act: Vec<T> = pre.iter().map(|v| gelu(*v)).collect();
        let mut raw = vec![T::zero(); s * 9];
        flops.source += linear(&act, s, h, 9, self.p(o.cam_fc2.range()), &mut raw);
        if let Some(t) = tape {
            t.cam_in = cam_in.to_vec();
            t.cam_pre = pre;
            t.cam_act = act;
        }
        raw.chunks(9).map(|c| core::array::from_fn(|i| c[i])).collect()
    }

    fn run_head(&self, head: &HeadLayout, input: &[T], keep: bool, flops: &mut u64) -> (Vec<T>, Option<HeadTape<T>>) {
        let p = self.config.patches();
        let mut grid = vec![T::zero(); p * head.proj.dout];
        *flops += linear(input, p, self.config.dim, head.proj.dout, self.p(head.proj.range()), &mut grid);
        let mut cols_all = Vec::new();
        let mut outs: Vec<Vec<T>> = Vec::new();
        let mut cols = Vec::new();
        for (uc, lin) in &head.convs {
            let mut out = Vec::new();
            let inp = outs.last().unwrap_or(&grid);
            *flops += uc.forward(inp, self.p(lin.range()), &mut cols, &mut out);
            if keep {
                cols_all.push(core::mem::take(&mut cols));
            }
            outs.push(out);
        }
        let last = outs.last().unwrap_or(&grid);
        let px = self.config.pixels();
        let mut raw = vec![T::zero(); px * head.out.dout];
        *flops += linear(last, px, head.out.din, head.out.dout, self.p(head.out.range()), &mut raw);
        let tape = keep.then(|| HeadTape { input: input.to_vec(), grid, cols: cols_all, outs, raw: raw.clone() });
        (raw, tape)
    }

    fn head_backward(&self, head: &HeadLayout, t: &HeadTape<T>, draw: &[T], dp: &mut [T]) -> Vec<T> {
        let px = self.config.pixels();
        let last = t.outs.last().unwrap_or(&t.grid);
        let mut dcur = vec![T::zero(); last.len()];
        linear_backward(last, px, head.out.din, head.out.dout, self.p(head.out.range()), draw, Some(&mut dcur), &mut dp[head.out.range()]);
        for (i, (uc, lin)) in head.convs.iter().enumerate().rev() {
            let inp = if i == 0 { &t.grid } else { &t.outs[i - 1] };
            let mut dinp = vec![T::zero(); inp.len()];
            uc.backward(&t.cols[i], &t.outs[i], self.p(lin.range()), &mut dcur, Some(&mut dinp), &mut dp[lin.range()]);
            dcur = dinp;
        }
        let p = self.config.patches();
        let mut dtok = vec![T::zero(); p * self.config.dim];
        linear_backward(&t.input, p, self.config.dim, head.proj.dout, self.p(head.proj.range()), &dcur, Some(&mut dtok), &mut dp[head.proj.range()]);
        dtok
    }

    fn activate(&self, rgb_raw: &[T], pt_raw: &[T]) -> TargetMaps<T> {
        let px = self.config.pixels();
        let lim = T::c(CONF_CLAMP);
        let mut pointmap = Vec::with_capacity(3 * px);
        let mut confidence = Vec::with_capacity(px);
        for r in pt_raw.chunks(4) {
            pointmap.extend_from_slice(&r[..3]);
            confidence.push(r[3].max(-lim).min(lim).exp());
        }
        TargetMaps {
            width: self.config.resolution,
            height: self.config.resolution,
            rgb: rgb_raw.iter().map(|v| rgb_activation(*v)).collect(),
            pointmap,
            confidence,
        }
    }

    /// RGB, point and confidence maps from the final patch tokens of one
    /// target view (`patches x dim`).
    pub fn decode_heads(&self, patch_tokens: &[T]) -> Result<TargetMaps<T>> {
        if patch_tokens.len() != self.config.patches() * self.config.dim {
            return Err(Error::shape("decode_heads expects patches x dim tokens"));
        }
        let mut f = 0;
        let (rgb, _) = self.run_head(&self.layout.offsets.rgb, patch_tokens, false, &mut f);
        let (pt, _) = self.run_head(&self.layout.offsets.point, patch_tokens, false, &mut f);
        Ok(self.activate(&rgb, &pt))
    }

    fn patch_rows(&self, start: usize) -> Range<usize> {
        let first = start + 1 + self.config.registers;
        first..first + self.config.patches()
    }

    fn run(
        &self,
        images: &[&[f32]],
        intrinsics: &Intrinsics,
        targets: &[CameraPose],
        mode: MaskMode,
        mut tape: Option<&mut Tape<T>>,
    ) -> Result<MultiOutputs<T>> {
        self.check_images(images)?;
        let cfg = &self.config;
        let (d, tpv, s) = (cfg.dim, cfg.tokens_per_view(), images.len());
        let layout = TokenLayout::sources_then_targets(s, targets.len(), tpv, mode)?;
        let n = layout.len();
        let src_rows = s * tpv;
        let mut flops = FlopCount::default();
        let mut x = vec![T::zero(); n * d];
        let mut src_patches = Vec::new();
        for (i, img) in images.iter().enumerate() {
            let start = src_patches.len();
            self.patchify(img, 3, &mut src_patches);
            flops.source += self.embed_view(&src_patches[start..], self.layout.offsets.patch, usize::from(i > 0), &mut x[i * tpv * d..(i + 1) * tpv * d]);
        }
        let mut tgt_rays = Vec::new();
        for (j, pose) in targets.iter().enumerate() {
            let rays = self.ray_patches(pose)?;
            let v = s + j;
            flops.target += self.embed_view(&rays, self.layout.offsets.ray, 1, &mut x[v * tpv * d..(v + 1) * tpv * d]);
            if tape.is_some() {
                tgt_rays.extend_from_slice(&rays);
            }
        }
        let frame = layout.groups(AttentionKind::Frame)?;
        let global = layout.groups(AttentionKind::Global)?;
        let mut subs = Vec::new();
        for pair in &self.layout.offsets.layers {
            for (sl, groups) in pair.iter().zip([&frame, &global]) {
                let mut st = SubTape::default();
                self.sublayer(sl, &mut x, n, src_rows, Mixer::Groups(groups), tape.is_some().then_some(&mut st), None, &mut flops)?;
                if tape.is_some() {
                    subs.push(st);
                }
            }
        }
        let mut tokens = vec![T::zero(); n * d];
        let mut final_ln = LnCache::default();
        layer_norm(&x, n, d, self.p(self.layout.offsets.norm.range()), &mut tokens, tape.is_some().then_some(&mut final_ln));

        let cam_in = gather(&tokens, d, layout.sources().map(|v| v.start));
        let raw_poses = self.camera_head(&cam_in, s, tape.as_deref_mut(), &mut flops);
        let poses = raw_poses.iter().map(|r| pose_from_raw(r, *intrinsics)).collect();

        let mut maps = Vec::with_capacity(targets.len());
        let mut head_tapes = Vec::new();
        for v in layout.targets() {
            let input = gather(&tokens, d, self.patch_rows(v.start));
            let mut f = 0;
            let (rgb, t_rgb) = self.run_head(&self.layout.offsets.rgb, &input, tape.is_some(), &mut f);
            let (pt, t_pt) = self.run_head(&self.layout.offsets.point, &input, tape.is_some(), &mut f);
            flops.target += f;
            maps.push(self.activate(&rgb, &pt));
            if let (Some(a), Some(b)) = (t_rgb, t_pt) {
                head_tapes.push([a, b]);
            }
        }
        if let Some(t) = tape {
            t.layout = Some(layout.clone());
            t.src_patches = src_patches;
            t.tgt_rays = tgt_rays;
            t.subs = subs;
            t.final_ln = final_ln;
            t.heads = head_tapes;
        }
        Ok(MultiOutputs { poses, raw_poses, targets: maps, tokens, layout, flops })
    }

    /// Joint forward over the source views and one target view under the
    /// causal mask.
    pub fn forward_joint(&self, images: &[&[f32]], intrinsics: &Intrinsics, target: &CameraPose) -> Result<ModelOutputs<T>> {
        let mut out = self.run(images, intrinsics, core::slice::from_ref(target), MaskMode::SingleTarget, None)?;
        let target = out.targets.pop().ok_or_else(|| Error::invalid("missing target output"))?;
        Ok(ModelOutputs { poses: out.poses, raw_poses: out.raw_poses, target, tokens: out.tokens, layout: out.layout, flops: out.flops })
    }

    /// Joint forward with any number of mutually isolated targets. Each
    /// target's outputs equal those of its own single-target joint forward.
    pub fn forward_multi(&self, images: &[&[f32]], intrinsics: &Intrinsics, targets: &[CameraPose]) -> Result<MultiOutputs<T>> {
        self.run(images, intrinsics, targets, MaskMode::MultiTarget, None)
    }

    /// [`Model::forward_multi`] recording the activations needed by
    /// [`Model::backward`].
    pub fn forward_train(&self, images: &[&[f32]], intrinsics: &Intrinsics, targets: &[CameraPose]) -> Result<(MultiOutputs<T>, Tape<T>)> {
        let mut tape = Tape::default();
        let out = self.run(images, intrinsics, targets, MaskMode::MultiTarget, Some(&mut tape))?;
        Ok((out, tape))
    }

    /// Source-only trunk pass recording every global block's keys and values.
    pub fn forward_stage1(&self, images: &[&[f32]], intrinsics: &Intrinsics) -> Result<Stage1Output<T>> {
        let (mut x, layout) = self.tokenize_sources(images)?;
        let d = self.config.dim;
        let n = layout.len();
        let mut flops = FlopCount { source: images.len() as u64 * self.config.patches() as u64 * 2 * self.layout.offsets.patch.din as u64 * d as u64, target: 0 };
        let frame = layout.groups(AttentionKind::Frame)?;
        let global = layout.groups(AttentionKind::Global)?;
        let mut cache = SceneCache::new(layout.clone(), d, self.fingerprint());
        for [fr, gl] in &self.layout.offsets.layers {
            self.sublayer(fr, &mut x, n, n, Mixer::Groups(&frame), None, None, &mut flops)?;
            self.sublayer(gl, &mut x, n, n, Mixer::Groups(&global), None, Some(&mut cache), &mut flops)?;
        }
        let mut tokens = vec![T::zero(); n * d];
        layer_norm(&x, n, d, self.p(self.layout.offsets.norm.range()), &mut tokens, None);
        let cam_in = gather(&tokens, d, layout.sources().map(|v| v.start));
        let raw_poses = self.camera_head(&cam_in, images.len(), None, &mut flops);
        let poses: Vec<CameraPose> = raw_poses.iter().map(|r| pose_from_raw(r, *intrinsics)).collect();
        cache.set_source_poses(poses.clone())?;
        Ok(Stage1Output { cache: cache.seal(), poses, raw_poses, flops })
    }

    /// Target-only pass reading source keys and values from a sealed cache.
    pub fn forward_stage2(&self, target: &CameraPose, cache: &SceneCache<T>) -> Result<(TargetMaps<T>, FlopCount)> {
        let fingerprint = self.fingerprint();
        cache.check(fingerprint)?;
        if cache.blocks().len() != self.config.layers || cache.dim() != self.config.dim {
            return Err(Error::ConfigMismatch("cache does not match the model depth or width".into()));
        }
        let rays = self.ray_patches(target)?;
        let d = self.config.dim;
        let n = self.config.tokens_per_view();
        let mut flops = FlopCount::default();
        let mut x = vec![T::zero(); n * d];
        flops.target += self.embed_view(&rays, self.layout.offsets.ray, 1, &mut x);
        let views = [0..n];
        let frame = [AttnGroup { queries: vec![0..n], keys: vec![0..n] }];
        for (block, [fr, gl]) in self.layout.offsets.layers.iter().enumerate() {
            self.sublayer(fr, &mut x, n, 0, Mixer::Groups(&frame), None, None, &mut flops)?;
            self.sublayer(gl, &mut x, n, 0, Mixer::Cached { cache, block, views: &views, fingerprint }, None, None, &mut flops)?;
        }
        let mut tokens = vec![T::zero(); n * d];
        layer_norm(&x, n, d, self.p(self.layout.offsets.norm.range()), &mut tokens, None);
        let input = gather(&tokens, d, self.patch_rows(0));
        let mut f = 0;
        let (rgb, _) = self.run_head(&self.layout.offsets.rgb, &input, false, &mut f);
        let (pt, _) = self.run_head(&self.layout.offsets.point, &input, false, &mut f);
        flops.target += f;
        Ok((self.activate(&rgb, &pt), flops))
    }

    /// Accumulates parameter gradients of a training forward into `dparams`.
    pub fn backward(&self, tape: &Tape<T>, grads: &OutputGrads<T>, dparams: &mut [T]) -> Result<()> {
        let layout = tape.layout.as_ref().ok_or_else(|| Error::invalid("tape was not recorded"))?;
        if dparams.len() != self.params.len() {
            return Err(Error::shape("gradient buffer size"));
        }
        let s = layout.sources().count();
        if grads.raw_poses.len() != s || grads.targets.len() != tape.heads.len() {
            return Err(Error::shape("output gradient counts do not match the forward pass"));
        }
        let cfg = &self.config;
        let (d, n, px) = (cfg.dim, layout.len(), cfg.pixels());
        let o = &self.layout.offsets;
        let lim = CONF_CLAMP;
        let mut dtok = vec![T::zero(); n * d];

        for ((v, ht), g) in layout.targets().zip(&tape.heads).zip(&grads.targets) {
            let [t_rgb, t_pt] = ht;
            let drgb: Vec<T> = t_rgb.raw.iter().zip(&g.rgb).map(|(r, gg)| *gg * rgb_activation_grad(*r)).collect();
            let mut dpt = vec![T::zero(); 4 * px];
            for i in 0..px {
                dpt[4 * i..4 * i + 3].copy_from_slice(&g.pointmap[3 * i..3 * i + 3]);
                let r = t_pt.raw[4 * i + 3];
                if r.f64().abs() < lim {
                    dpt[4 * i + 3] = g.confidence[i] * r.exp();
                }
            }
            let a = self.head_backward(&o.rgb, t_rgb, &drgb, dparams);
            let b = self.head_backward(&o.point, t_pt, &dpt, dparams);
            add_rows(&mut dtok, d, self.patch_rows(v.start), &a);
            add_rows(&mut dtok, d, self.patch_rows(v.start), &b);
        }

        let h = cfg.camera_hidden;
        let draw: Vec<T> = grads.raw_poses.iter().flat_map(|r| r.iter().copied()).collect();
        let mut dact = vec![T::zero(); s * h];
        linear_backward(&tape.cam_act, s, h, 9, self.p(o.cam_fc2.range()), &draw, Some(&mut dact), &mut dparams[o.cam_fc2.range()]);
        for (g, p) in dact.iter_mut().zip(&tape.cam_pre) {
            *g *= gelu_grad(*p);
        }
        let mut dcam = vec![T::zero(); s * d];
        linear_backward(&tape.cam_in, s, d, h, self.p(o.cam_fc1.range()), &dact, Some(&mut dcam), &mut dparams[o.cam_fc1.range()]);
        add_rows(&mut dtok, d, layout.sources().map(|v| v.start), &dcam);

        let mut dx = vec![T::zero(); n * d];
        layer_norm_backward(&tape.final_ln, n, d, self.p(o.norm.range()), &dtok, &mut dx, &mut dparams[o.norm.range()]);
        let subs: Vec<&SubLayer> = o.layers.iter().flat_map(|p| p.iter()).collect();
        for (sl, st) in subs.iter().zip(&tape.subs).rev() {
            self.sublayer_backward(sl, st, n, &mut dx, dparams);
        }

        let (r, p) = (cfg.registers, cfg.patches());
        let (mut si, mut ti) = (0, 0);
        for v in layout.views() {
            let rows = &dx[v.start * d..(v.start + v.len) * d];
            let slot = usize::from(!v.special);
            add_into(&mut dparams[o.camera[slot]..o.camera[slot] + d], &rows[..d]);
            add_into(&mut dparams[o.registers[slot]..o.registers[slot] + r * d], &rows[d..(1 + r) * d]);
            let dpatch = &rows[(1 + r) * d..];
            let (lin, input) = match v.role {
                crate::attention::ViewRole::Source => {
                    let w = o.patch.din * p;
                    si += 1;
                    (o.patch, &tape.src_patches[(si - 1) * w..si * w])
                }
                crate::attention::ViewRole::Target => {
                    let w = o.ray.din * p;
                    ti += 1;
                    (o.ray, &tape.tgt_rays[(ti - 1) * w..ti * w])
                }
            };
            linear_backward(input, p, lin.din, d, self.p(lin.range()), dpatch, None, &mut dparams[lin.range()]);
        }
        Ok(())
    }
}
