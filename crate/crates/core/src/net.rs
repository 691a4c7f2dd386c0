//! Forward graph: shared two-stream encoder, fusion modules, decoder and heads.
//!
//! Parameter names follow the graph: `enc.*` (shared stream weights),
//! `proj.l{i}` (shared projections), `clm.*`, `cam{i}.*`, `esm.*`, `base.l{i}`
//! (summation fusion used when a module is disabled), `dec.*` and `head.*`.
//! Every convolution `x` owns `x.weight` and `x.bias`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    channel_self_attention, corr, spatial_attention, ChannelAttentionParams, CorrParams,
    SpatialAttentionParams, SPATIAL_KERNEL,
};
use crate::autodiff::{Tape, Var};
use crate::config::{NetworkConfig, LEVELS};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::params::{BoundParams, Init, ParamDecl, ParamStore};
use crate::tensor::{ConvGeometry, Shape, Tensor};

/// Levels fused by the activation module.
pub const CAM_LEVELS: [usize; 3] = [2, 3, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Inference,
    /// Dropout active, masks drawn from a generator seeded with `seed`.
    Training { seed: u64 },
}

/// Raw encoder outputs and their projections for both streams; index 0 is level 1.
#[derive(Clone, Debug)]
pub struct EncoderFeatures<'t> {
    pub raw_rgb: Vec<Var<'t>>,
    pub raw_tir: Vec<Var<'t>>,
    pub rgb: Vec<Var<'t>>,
    pub tir: Vec<Var<'t>>,
}

#[derive(Clone, Copy, Debug)]
pub struct ModuleOutputs<'t> {
    /// Level 5.
    pub clm: Var<'t>,
    /// Levels 2, 3 and 4.
    pub cam: [Var<'t>; 3],
    /// Level 1.
    pub esm: Var<'t>,
}

impl<'t> ModuleOutputs<'t> {
    /// Fused feature at `level` (1-based).
    pub fn level(&self, level: usize) -> Var<'t> {
        match level {
            1 => self.esm,
            5 => self.clm,
            l => self.cam[l - 2],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PredictionSet<'t> {
    /// `(n, C, H, W)` logits.
    pub sem: Var<'t>,
    /// `(n, C, H/4, W/4)` logits.
    pub sem2: Var<'t>,
    /// `(n, 1, H/32, W/32)` logit.
    pub loc: Var<'t>,
    /// `(n, 1, H/2, W/2)` logit.
    pub edge: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct ForwardPass<'t> {
    pub features: EncoderFeatures<'t>,
    pub modules: ModuleOutputs<'t>,
    pub predictions: PredictionSet<'t>,
}

fn conv_decl(decls: &mut Vec<ParamDecl>, name: &str, out_ch: usize, in_ch: usize, k: usize) {
    decls.push(ParamDecl {
        name: format!("{name}.weight"),
        shape: Shape::new(out_ch, in_ch, k, k),
        init: Init::KaimingNormal,
    });
    decls.push(ParamDecl {
        name: format!("{name}.bias"),
        shape: Shape::new(1, 1, 1, out_ch),
        init: Init::Zeros,
    });
}

/// Output width of decoder block `i`: it hands features to level `i - 1`.
fn decoder_width(config: &NetworkConfig, block: usize) -> usize {
    config.width(block.saturating_sub(1).max(1))
}

/// Every parameter tensor the configuration needs.
pub fn param_layout(config: &NetworkConfig) -> Vec<ParamDecl> {
    let mut d = Vec::new();
    let c = |l: usize| config.width(l);
    let raw = |l: usize| config.raw_width(l);

    conv_decl(&mut d, "enc.l1.conv", raw(1), 3, 3);
    for l in 2..=LEVELS {
        conv_decl(&mut d, &format!("enc.l{l}.conv_a"), raw(l), raw(l - 1), 3);
        conv_decl(&mut d, &format!("enc.l{l}.conv_b"), raw(l), raw(l), 3);
    }
    for l in 1..=LEVELS {
        conv_decl(&mut d, &format!("proj.l{l}"), c(l), raw(l), 1);
    }

    let ab = config.ablation;
    if ab.use_clm {
        conv_decl(&mut d, "clm.corr", c(5), c(5), 1);
        conv_decl(&mut d, "clm.fuse", c(5), 2 * c(5), 1);
    } else {
        conv_decl(&mut d, "base.l5", c(5), c(5), 1);
    }
    for l in CAM_LEVELS {
        if ab.use_cam {
            conv_decl(&mut d, &format!("cam{l}.sum_conv"), c(l), c(l), 3);
            conv_decl(&mut d, &format!("cam{l}.sa"), 1, 2, SPATIAL_KERNEL);
            d.push(ParamDecl {
                name: format!("cam{l}.gamma"),
                shape: Shape::scalar(),
                init: Init::Zeros,
            });
        } else {
            conv_decl(&mut d, &format!("base.l{l}"), c(l), c(l), 1);
        }
    }
    if ab.use_esm {
        conv_decl(&mut d, "esm.mul_conv", c(1), c(1), 3);
        conv_decl(&mut d, "esm.sum_conv", c(1), c(1), 3);
        let head = c(1) / config.esm_dilations.len();
        for k in 0..config.esm_dilations.len() {
            conv_decl(&mut d, &format!("esm.head{k}"), head, c(1), 3);
        }
    } else {
        conv_decl(&mut d, "base.l1", c(1), c(1), 1);
    }

    for block in (1..=LEVELS).rev() {
        let out = decoder_width(config, block);
        conv_decl(&mut d, &format!("dec.d{block}.conv_a"), out, c(block), 3);
        conv_decl(&mut d, &format!("dec.d{block}.conv_b"), out, out, 3);
        if block < LEVELS {
            conv_decl(&mut d, &format!("dec.skip{block}"), c(block), c(block), 1);
        }
    }
    conv_decl(&mut d, "head.sem", config.num_classes, c(1), 1);
    conv_decl(&mut d, "head.loc", 1, c(5), 1);
    conv_decl(&mut d, "head.edge", 1, c(1), 1);
    d
}

/// Kaiming-normal kernels, zero biases and zero attention gains.
pub fn init_params(config: &NetworkConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    Ok(ParamStore::from_decls(&param_layout(config), seed))
}

fn conv<'t>(bp: &BoundParams<'t>, name: &str, x: Var<'t>, geom: ConvGeometry) -> Result<Var<'t>> {
    let kernel = bp.get(&format!("{name}.weight"))?;
    let bias = bp.get(&format!("{name}.bias"))?;
    x.conv2d(kernel, Some(bias), geom)
}

fn conv1x1<'t>(bp: &BoundParams<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    conv(bp, name, x, ConvGeometry::pointwise())
}

fn conv3x3<'t>(bp: &BoundParams<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    conv(bp, name, x, ConvGeometry::same(3, 1))
}

/// One pass of the shared encoder: five levels of raw features.
fn encode_stream<'t>(bp: &BoundParams<'t>, x: Var<'t>) -> Result<Vec<Var<'t>>> {
    let down = ConvGeometry::new(2, 1, 1);
    let mut feats = Vec::with_capacity(LEVELS);
    let mut h = conv(bp, "enc.l1.conv", x, down)?.relu();
    feats.push(h);
    for l in 2..=LEVELS {
        h = conv(bp, &format!("enc.l{l}.conv_a"), h, down)?.relu();
        h = conv3x3(bp, &format!("enc.l{l}.conv_b"), h)?.relu();
        feats.push(h);
    }
    Ok(feats)
}

/// Runs both streams through the same encoder and projection weights.
///
/// A single-channel thermal image is replicated to three channels first.
pub fn encode_pair<'t>(
    bp: &BoundParams<'t>,
    rgb: Var<'t>,
    tir: Var<'t>,
    config: &NetworkConfig,
) -> Result<EncoderFeatures<'t>> {
    let (rs, ts) = (rgb.shape(), tir.shape());
    if rs.c != 3 {
        return Err(Error::invalid("encode_pair", format!("RGB input {rs} must have 3 channels")));
    }
    if (ts.n, ts.h, ts.w) != (rs.n, rs.h, rs.w) || !(ts.c == 1 || ts.c == 3) {
        return Err(Error::ShapeMismatch {
            op: "encode_pair",
            left: rs,
            right: ts,
        });
    }
    config.check_input_size(rs.h, rs.w)?;
    let tir = if ts.c == 1 {
        tir.tape().concat_channels(&[tir, tir, tir])?
    } else {
        tir
    };
    let raw_rgb = encode_stream(bp, rgb)?;
    let raw_tir = encode_stream(bp, tir)?;
    let project = |raw: &[Var<'t>]| -> Result<Vec<Var<'t>>> {
        raw.iter()
            .enumerate()
            .map(|(i, f)| conv1x1(bp, &format!("proj.l{}", i + 1), *f))
            .collect()
    };
    let rgb = project(&raw_rgb)?;
    let tir = project(&raw_tir)?;
    Ok(EncoderFeatures {
        raw_rgb,
        raw_tir,
        rgb,
        tir,
    })
}

fn same_shape(op: &'static str, a: Var<'_>, b: Var<'_>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// Location module: co-attention of each stream against the product feature,
/// then a 1×1 convolution over `[sum, product]` of the two correlated features.
pub fn clm_forward<'t>(bp: &BoundParams<'t>, f5_r: Var<'t>, f5_t: Var<'t>) -> Result<Var<'t>> {
    same_shape("clm", f5_r, f5_t)?;
    let params = CorrParams {
        kernel: bp.get("clm.corr.weight")?,
        bias: Some(bp.get("clm.corr.bias")?),
    };
    let f_mul = f5_r.mul(f5_t)?;
    let r_corr = corr(f_mul, f5_r, &params)?;
    let t_corr = corr(f_mul, f5_t, &params)?;
    let combined = f5_r
        .tape()
        .concat_channels(&[r_corr.add(t_corr)?, r_corr.mul(t_corr)?])?;
    conv1x1(bp, "clm.fuse", combined)
}

/// Activation module at `level` ∈ {2, 3, 4}: the spatial map of the raw
/// product gates the convolved sum, followed by channel self-attention.
pub fn cam_forward<'t>(bp: &BoundParams<'t>, fi_r: Var<'t>, fi_t: Var<'t>, level: usize) -> Result<Var<'t>> {
    if !CAM_LEVELS.contains(&level) {
        return Err(Error::invalid("cam", format!("level {level} is not one of {CAM_LEVELS:?}")));
    }
    same_shape("cam", fi_r, fi_t)?;
    let sa = SpatialAttentionParams {
        kernel: bp.get(&format!("cam{level}.sa.weight"))?,
        bias: Some(bp.get(&format!("cam{level}.sa.bias"))?),
    };
    let csa = ChannelAttentionParams {
        gamma: bp.get(&format!("cam{level}.gamma"))?,
    };
    let map = spatial_attention(fi_r.mul(fi_t)?, &sa)?;
    let summed = conv3x3(bp, &format!("cam{level}.sum_conv"), fi_r.add(fi_t)?)?;
    channel_self_attention(summed.mul(map)?, &csa)
}

/// Edge module: convolved product plus convolved sum, then parallel dilated
/// 3×3 heads concatenated back to the level-1 width.
pub fn esm_forward<'t>(
    bp: &BoundParams<'t>,
    f1_r: Var<'t>,
    f1_t: Var<'t>,
    config: &NetworkConfig,
) -> Result<Var<'t>> {
    same_shape("esm", f1_r, f1_t)?;
    let c = f1_r.shape().c;
    let heads = config.esm_dilations.len();
    if heads == 0 || c % heads != 0 {
        return Err(Error::invalid("esm", format!("{c} channels cannot be split across {heads} heads")));
    }
    let s = conv3x3(bp, "esm.mul_conv", f1_r.mul(f1_t)?)?.add(conv3x3(bp, "esm.sum_conv", f1_r.add(f1_t)?)?)?;
    let outs = config
        .esm_dilations
        .iter()
        .enumerate()
        .map(|(k, &rate)| conv(bp, &format!("esm.head{k}"), s, ConvGeometry::same(3, rate)))
        .collect::<Result<Vec<_>>>()?;
    f1_r.tape().concat_channels(&outs)
}

/// Summation fusion used in place of a disabled module.
pub fn baseline_fusion<'t>(bp: &BoundParams<'t>, fi_r: Var<'t>, fi_t: Var<'t>, level: usize) -> Result<Var<'t>> {
    same_shape("baseline fusion", fi_r, fi_t)?;
    conv1x1(bp, &format!("base.l{level}"), fi_r.add(fi_t)?)
}

pub fn fuse<'t>(bp: &BoundParams<'t>, f: &EncoderFeatures<'t>, config: &NetworkConfig) -> Result<ModuleOutputs<'t>> {
    let ab = config.ablation;
    let at = |l: usize| (f.rgb[l - 1], f.tir[l - 1]);

    let (r, t) = at(5);
    let clm = if ab.use_clm {
        clm_forward(bp, r, t)?
    } else {
        baseline_fusion(bp, r, t, 5)?
    };
    let mut cam = Vec::with_capacity(3);
    for l in CAM_LEVELS {
        let (r, t) = at(l);
        cam.push(if ab.use_cam {
            cam_forward(bp, r, t, l)?
        } else {
            baseline_fusion(bp, r, t, l)?
        });
    }
    let (r, t) = at(1);
    let esm = if ab.use_esm {
        esm_forward(bp, r, t, config)?
    } else {
        baseline_fusion(bp, r, t, 1)?
    };
    Ok(ModuleOutputs {
        clm,
        cam: [cam[0], cam[1], cam[2]],
        esm,
    })
}

/// Five decoder blocks, coarse to fine, plus the prediction heads.
///
/// Block `i` takes `up(previous) + skip_i(module output at level i)` (block 5
/// takes the location feature directly) and applies dropout, two 3×3
/// conv+relu layers and a ×2 upsample. The intermediate semantic prediction
/// reads block 2 before its upsample; the final one reads block 1 after it.
pub fn decode<'t>(
    bp: &BoundParams<'t>,
    modules: &ModuleOutputs<'t>,
    config: &NetworkConfig,
    mode: Mode,
) -> Result<PredictionSet<'t>> {
    let (training, seed) = match mode {
        Mode::Inference => (false, 0),
        Mode::Training { seed } => (true, seed),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = modules.clm;
    let mut sem2 = None;
    for block in (1..=LEVELS).rev() {
        if block < LEVELS {
            let skip = conv1x1(bp, &format!("dec.skip{block}"), modules.level(block))?;
            x = x.add(skip)?;
        }
        x = x.dropout(config.dropout, &mut rng, training)?;
        x = conv3x3(bp, &format!("dec.d{block}.conv_a"), x)?.relu();
        x = conv3x3(bp, &format!("dec.d{block}.conv_b"), x)?.relu();
        if block == 2 {
            sem2 = Some(conv1x1(bp, "head.sem", x)?);
        }
        x = x.upsample(2)?;
    }
    Ok(PredictionSet {
        sem: conv1x1(bp, "head.sem", x)?,
        sem2: sem2.expect("block 2 runs"),
        loc: conv1x1(bp, "head.loc", modules.clm)?,
        edge: conv1x1(bp, "head.edge", modules.esm)?,
    })
}

pub fn forward<'t>(
    bp: &BoundParams<'t>,
    rgb: Var<'t>,
    tir: Var<'t>,
    config: &NetworkConfig,
    mode: Mode,
) -> Result<ForwardPass<'t>> {
    let features = encode_pair(bp, rgb, tir, config)?;
    let modules = fuse(bp, &features, config)?;
    let predictions = decode(bp, &modules, config, mode)?;
    Ok(ForwardPass {
        features,
        modules,
        predictions,
    })
}

/// A configuration together with matching parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: NetworkConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn new(config: NetworkConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        params.check_against(&param_layout(&config))?;
        Ok(Model { config, params })
    }

    /// Segmentation logits `(n, C, H, W)` in inference mode.
    pub fn logits(&self, rgb: &Tensor, tir: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bp = self.params.bind(&tape);
        let pass = forward(&bp, tape.leaf(rgb.clone()), tape.leaf(tir.clone()), &self.config, Mode::Inference)?;
        let out = pass.predictions.sem.value();
        if !out.all_finite() {
            return Err(Error::NonFinite("segmentation logits".into()));
        }
        Ok((*out).clone())
    }

    /// Per-pixel class indices without post-processing.
    pub fn predict(&self, rgb: &Tensor, tir: &Tensor) -> Result<LabelMap> {
        LabelMap::argmax(&self.logits(rgb, tir)?)
    }
}
