//! The siamese network: a masked online branch that predicts dense features of the
//! other view, and an EMA target branch that produces them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::MaskPattern;
use crate::error::{Result, SimError};
use crate::geometry::{grid_positions_a, mask_token_pos_input, sincos_table, CropSpec, GridSpec, ScaleEncoding};
use crate::image::Image;
use crate::nn::{blocks, Block, BnMode, BnStats, Builder, Fwd, Linear, Norm, NormKind, ParamId, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetKind {
    /// Dense features from the EMA target branch.
    Feature,
    /// Per-patch normalised pixels of view b; no target branch.
    Pixel,
}

impl TargetKind {
    pub fn name(self) -> &'static str {
        match self {
            TargetKind::Feature => "feature",
            TargetKind::Pixel => "pixel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "feature" => Some(TargetKind::Feature),
            "pixel" => Some(TargetKind::Pixel),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub backbone_dim: usize,
    pub backbone_depth: usize,
    pub backbone_heads: usize,
    /// Width D of the projector, decoder and loss space.
    pub embed_dim: usize,
    pub projector_depth: usize,
    pub projector_heads: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
    /// Norm inside projector and decoder blocks; the backbone always uses layer norm.
    pub norm: NormKind,
    pub target: TargetKind,
    pub bn_momentum: f64,
    pub scale_encoding: ScaleEncoding,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            backbone_dim: 96,
            backbone_depth: 4,
            backbone_heads: 4,
            embed_dim: 64,
            projector_depth: 2,
            projector_heads: 4,
            decoder_depth: 4,
            decoder_heads: 4,
            mlp_ratio: 4,
            norm: NormKind::Batch,
            target: TargetKind::Feature,
            bn_momentum: 0.1,
            scale_encoding: ScaleEncoding::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, msg: String| Err(SimError::config(key, msg));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return err(
                "model.patch_size",
                format!("{} does not divide image size {}", self.patch_size, self.image_size),
            );
        }
        for (key, dim, heads) in [
            ("model.backbone_heads", self.backbone_dim, self.backbone_heads),
            ("model.projector_heads", self.embed_dim, self.projector_heads),
            ("model.decoder_heads", self.embed_dim, self.decoder_heads),
        ] {
            if heads == 0 || dim % heads != 0 {
                return err(key, format!("{heads} heads do not divide width {dim}"));
            }
        }
        if !self.backbone_dim.is_multiple_of(4) || !self.embed_dim.is_multiple_of(4) {
            return err("model.embed_dim", "sin-cos embeddings need widths divisible by 4".into());
        }
        if self.backbone_depth == 0 || self.decoder_depth == 0 {
            return err("model.decoder_depth", "depths must be positive".into());
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec::square(self.grid_side()).expect("validated grid")
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_side().pow(2)
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Width of the decoder output: D for feature targets, raw patch length for pixels.
    pub fn prediction_dim(&self) -> usize {
        match self.target {
            TargetKind::Feature => self.embed_dim,
            TargetKind::Pixel => self.patch_len(),
        }
    }
}

/// `[B, N, p*p*3]` patches in row-major token order; each patch flattened as (row, col, channel).
pub fn patchify<T: Scalar>(images: &[&Image], patch: usize) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| SimError::invalid("patchify", "empty batch"))?;
    let (h, w) = (first.height, first.width);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(SimError::invalid(
            "patchify",
            format!("{h}x{w} image is not divisible into {patch}x{patch} patches"),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let plen = patch * patch * 3;
    let mut data = Vec::with_capacity(images.len() * gh * gw * plen);
    for img in images {
        if img.height != h || img.width != w {
            return Err(SimError::shape("patchify", &[h, w], &[img.height, img.width]));
        }
        for gy in 0..gh {
            for gx in 0..gw {
                for y in gy * patch..(gy + 1) * patch {
                    let row = (y * w + gx * patch) * 3;
                    data.extend(img.data[row..row + patch * 3].iter().map(|&v| T::of(f64::from(v))));
                }
            }
        }
    }
    Tensor::new([images.len(), gh * gw, plen], data)
}

/// Pixel-prediction targets: every patch standardised by its own mean and variance.
pub fn normalized_pixel_targets<T: Scalar>(patches: &Tensor<T>) -> Tensor<T> {
    let plen = *patches.shape().last().expect("rank 3");
    let mut out = patches.clone();
    for p in out.data_mut().chunks_exact_mut(plen) {
        let n = plen as f64;
        let mean = p.iter().map(|v| v.f64()).sum::<f64>() / n;
        let var = p.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-6).sqrt();
        p.iter_mut().for_each(|v| *v = T::of((v.f64() - mean) * inv));
    }
    out
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub patch_embed: Linear,
    pub blocks: Vec<Block>,
    pub norm: Norm,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct Projector {
    pub adapter: Linear,
    pub blocks: Vec<Block>,
    pub norm: Norm,
}

/// Backbone + projector; the online and target trees share this layout.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub backbone: Backbone,
    pub projector: Projector,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub mask_token: ParamId,
    /// `[PE(p_b), PE(s)]` (2D) to D.
    pub scale_mixer: Linear,
    pub blocks: Vec<Block>,
    pub norm: Norm,
    pub head: Linear,
}

impl Encoder {
    fn build<R: rand::Rng>(cfg: &ModelConfig, b: &mut Builder<'_, impl Scalar, R>) -> Result<Self> {
        let dim = cfg.backbone_dim;
        let backbone = Backbone {
            patch_embed: Linear::new(b, "backbone.patch_embed", cfg.patch_len(), dim),
            blocks: blocks(b, "backbone", cfg.backbone_depth, dim, cfg.backbone_heads, cfg.mlp_ratio, NormKind::Layer)?,
            norm: Norm::new(b, "backbone.norm", NormKind::Layer, dim),
            dim,
        };
        let d = cfg.embed_dim;
        let projector = Projector {
            adapter: Linear::new(b, "projector.adapter", dim, d),
            blocks: blocks(b, "projector", cfg.projector_depth, d, cfg.projector_heads, cfg.mlp_ratio, cfg.norm)?,
            norm: Norm::new(b, "projector.norm", cfg.norm, d),
        };
        Ok(Encoder { backbone, projector })
    }
}

impl Decoder {
    fn build<R: rand::Rng>(cfg: &ModelConfig, b: &mut Builder<'_, impl Scalar, R>) -> Result<Self> {
        let d = cfg.embed_dim;
        Ok(Decoder {
            mask_token: b.normal("decoder.mask_token", &[d], 0.02),
            scale_mixer: Linear::new(b, "decoder.scale_mixer", 2 * d, d),
            blocks: blocks(b, "decoder", cfg.decoder_depth, d, cfg.decoder_heads, cfg.mlp_ratio, cfg.norm)?,
            norm: Norm::new(b, "decoder.norm", cfg.norm, d),
            head: Linear::new(b, "decoder.head", d, cfg.prediction_dim()),
        })
    }
}

/// Parameters and running statistics of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct Net<T> {
    pub params: ParamStore<T>,
    pub bn: BnStats<T>,
}

impl<T: Scalar> Net<T> {
    pub fn cast<U: Scalar>(&self) -> Net<U> {
        Net {
            params: self.params.cast(),
            bn: self.bn.cast(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimModel<T> {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub online: Net<T>,
    pub online_decoder: Net<T>,
    pub target: Net<T>,
    /// Fixed backbone positional embeddings `[N, backbone_dim]`.
    pub backbone_pos: Tensor<T>,
    /// Decoder grid embeddings for view a `[N, D]`.
    pub decoder_pos: Tensor<T>,
}

impl<T: Scalar> SimModel<T> {
    /// Seeded initialisation; the target starts as a copy of the online encoder.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut params, mut bn) = (ParamStore::default(), BnStats::default());
        let encoder = Encoder::build(
            &cfg,
            &mut Builder {
                store: &mut params,
                stats: &mut bn,
                rng: &mut rng,
            },
        )?;
        let online = Net { params, bn };
        let (mut params, mut bn) = (ParamStore::default(), BnStats::default());
        let decoder = Decoder::build(
            &cfg,
            &mut Builder {
                store: &mut params,
                stats: &mut bn,
                rng: &mut rng,
            },
        )?;
        let grid = grid_positions_a(cfg.grid());
        Ok(SimModel {
            backbone_pos: sincos_table(&grid, cfg.backbone_dim)?,
            decoder_pos: sincos_table(&grid, cfg.embed_dim)?,
            target: online.clone(),
            online,
            online_decoder: Net { params, bn },
            encoder,
            decoder,
            cfg,
        })
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> SimModel<U> {
        SimModel {
            cfg: self.cfg.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            online: self.online.cast(),
            online_decoder: self.online_decoder.cast(),
            target: self.target.cast(),
            backbone_pos: self.backbone_pos.cast(),
            decoder_pos: self.decoder_pos.cast(),
        }
    }
}

/// Patch projection plus fixed positional embeddings: `[B, N, P]` to `[B, N, dim]`.
pub fn patch_embed<T: Scalar>(f: &mut Fwd<'_, T>, backbone: &Backbone, pos: &Tensor<T>, patches: Var) -> Result<Var> {
    let shape = f.tape.shape(patches).to_vec();
    if shape.len() != 3 || shape[1] != pos.shape()[0] {
        return Err(SimError::shape("patch_embed", &shape, pos.shape()));
    }
    let tokens = backbone.patch_embed.forward(f, patches)?;
    let pv = f.tape.constant(pos.clone());
    f.tape.add(tokens, pv)
}

fn run_blocks<T: Scalar>(f: &mut Fwd<'_, T>, blocks: &[Block], mut x: Var) -> Result<Var> {
    for b in blocks {
        x = b.forward(f, x)?;
    }
    Ok(x)
}

fn project<T: Scalar>(f: &mut Fwd<'_, T>, projector: &Projector, x: Var) -> Result<Var> {
    let h = projector.adapter.forward(f, x)?;
    let h = run_blocks(f, &projector.blocks, h)?;
    projector.norm.forward(f, h)
}

/// Flat row indices into `[B * N, ..]` of each sample's visible tokens.
fn visible_rows(masks: &[MaskPattern], n: usize) -> Result<(Vec<usize>, usize)> {
    let nv = masks.first().map(MaskPattern::num_visible).unwrap_or(0);
    let mut rows = Vec::with_capacity(masks.len() * nv);
    for (b, m) in masks.iter().enumerate() {
        if m.total() != n || m.num_visible() != nv {
            return Err(SimError::shape("mask", &[m.total(), m.num_visible()], &[n, nv]));
        }
        rows.extend(m.visible().iter().map(|&i| b * n + i));
    }
    Ok((rows, nv))
}

/// Rows of `x: [B, N, C]` selected by the masks, as `[B, Nv, C]`.
pub fn gather_visible<T: Scalar>(tape: &mut Tape<T>, x: Var, masks: &[MaskPattern]) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (b, n, c) = (shape[0], shape[1], shape[2]);
    if masks.len() != b {
        return Err(SimError::shape("gather_visible", &[masks.len()], &shape));
    }
    let (rows, nv) = visible_rows(masks, n)?;
    let flat = tape.reshape(x, &[b * n, c])?;
    let g = tape.gather(flat, 0, &rows)?;
    tape.reshape(g, &[b, nv, c])
}

/// Online encoder over the visible tokens of view a: `[B, Nv, D]`, ascending token order.
pub fn encode_online<T: Scalar>(
    f: &mut Fwd<'_, T>,
    model: &SimModel<T>,
    patches_a: Var,
    masks: &[MaskPattern],
) -> Result<Var> {
    let enc = &model.encoder;
    let tokens = patch_embed(f, &enc.backbone, &model.backbone_pos, patches_a)?;
    let visible = gather_visible(f.tape, tokens, masks)?;
    let h = run_blocks(f, &enc.backbone.blocks, visible)?;
    let h = enc.backbone.norm.forward(f, h)?;
    project(f, &enc.projector, h)
}

/// Target encoder over every token of view b. `f` must bind target parameters as constants.
pub fn encode_target<T: Scalar>(f: &mut Fwd<'_, T>, model: &SimModel<T>, patches_b: Var) -> Result<Var> {
    let enc = &model.encoder;
    let tokens = patch_embed(f, &enc.backbone, &model.backbone_pos, patches_b)?;
    let h = run_blocks(f, &enc.backbone.blocks, tokens)?;
    let h = enc.backbone.norm.forward(f, h)?;
    project(f, &enc.projector, h)
}

/// Mask-token embeddings `p_b = mixer([PE(p_b), PE(s)])` from a `[B, N, 2D]` input.
pub fn mask_token_embeds<T: Scalar>(f: &mut Fwd<'_, T>, decoder: &Decoder, mixer_input: Var) -> Result<Var> {
    decoder.scale_mixer.forward(f, mixer_input)
}

/// Decoder prediction of view b's dense representation, `[B, N, prediction_dim]`.
///
/// The decoder runs full self-attention over `[y_a + p_a_visible ; mask_token + p_b]`
/// and reads its output at the N mask-token positions.
pub fn decode_predict<T: Scalar>(
    f: &mut Fwd<'_, T>,
    decoder: &Decoder,
    y_a: Var,
    p_a_visible: Var,
    p_b: Var,
) -> Result<Var> {
    let (ys, ps, bs) = (f.tape.shape(y_a).to_vec(), f.tape.shape(p_a_visible).to_vec(), f.tape.shape(p_b).to_vec());
    if ys != ps || bs.len() != 3 || bs[0] != ys[0] || bs[2] != ys[2] {
        return Err(SimError::shape("decode_predict", &ys, if ys != ps { &ps } else { &bs }));
    }
    let (nv, n) = (ys[1], bs[1]);
    let visible = f.tape.add(y_a, p_a_visible)?;
    let masked = f.tape.add(p_b, f.var(decoder.mask_token))?;
    let x = f.tape.concat(&[visible, masked], 1)?;
    let h = run_blocks(f, &decoder.blocks, x)?;
    let h = decoder.norm.forward(f, h)?;
    let h = f.tape.slice(h, 1, nv, nv + n)?;
    decoder.head.forward(f, h)
}

/// Decoder inputs for one batch of view pairs.
#[derive(Clone, Debug)]
pub struct DecoderGeometry<T> {
    /// `[B, Nv, D]`
    pub p_a_visible: Tensor<T>,
    /// `[B, N, 2D]`
    pub mixer_input: Tensor<T>,
}

/// Builds the decoder's constant inputs; `decoder_pos` is the `[N, D]` grid table.
pub fn decoder_geometry<T: Scalar>(
    cfg: &ModelConfig,
    decoder_pos: &Tensor<T>,
    crops: &[(CropSpec, CropSpec)],
    masks: &[MaskPattern],
) -> Result<DecoderGeometry<T>> {
    let (n, d) = (cfg.num_tokens(), cfg.embed_dim);
    if decoder_pos.shape() != [n, d] {
        return Err(SimError::shape("decoder_geometry", decoder_pos.shape(), &[n, d]));
    }
    let (rows, nv) = visible_rows(masks, n)?;
    let table = decoder_pos.data();
    let mut pav = Vec::with_capacity(rows.len() * d);
    for &r in &rows {
        let i = r % n;
        pav.extend_from_slice(&table[i * d..(i + 1) * d]);
    }
    let mut mix = Vec::with_capacity(crops.len() * n * 2 * d);
    for (a, b) in crops {
        let t: Tensor<T> = mask_token_pos_input(a, b, cfg.grid(), d, cfg.scale_encoding)?;
        mix.extend_from_slice(t.data());
    }
    Ok(DecoderGeometry {
        p_a_visible: Tensor::new([masks.len(), nv, d], pav)?,
        mixer_input: Tensor::new([crops.len(), n, 2 * d], mix)?,
    })
}

/// Cosine EMA momentum ramp from `base` at step 0 to `final_` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmaSchedule {
    pub base: f64,
    pub final_: f64,
    pub total_steps: usize,
}

impl EmaSchedule {
    pub fn new(base: f64, final_: f64, total_steps: usize) -> Result<Self> {
        if !(base > 0.0 && base <= final_ && final_ <= 1.0) {
            return Err(SimError::config("ema", format!("need 0 < base <= final <= 1, got {base}, {final_}")));
        }
        Ok(EmaSchedule { base, final_, total_steps })
    }
}

pub fn ema_momentum(step: usize, schedule: &EmaSchedule) -> f64 {
    let total = schedule.total_steps.max(1);
    let step = if step > total {
        log::warn!("ema_momentum: step {step} beyond schedule end {total}; clamping");
        total
    } else {
        step
    };
    let t = step as f64 / total as f64;
    schedule.final_ - (schedule.final_ - schedule.base) * ((std::f64::consts::PI * t).cos() + 1.0) / 2.0
}

/// `target <- m * target + (1 - m) * online` for every parameter.
pub fn ema_update<T: Scalar>(online: &ParamStore<T>, target: &mut ParamStore<T>, m: f64) -> Result<()> {
    if !online.same_layout(target) {
        return Err(SimError::invalid("ema_update", "online and target parameter trees differ"));
    }
    let (m, k) = (T::of(m), T::of(1.0 - m));
    for (t, o) in target.values_mut().iter_mut().zip(online.values()) {
        for (tv, &ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = m * *tv + k * ov;
        }
    }
    Ok(())
}

/// Token-averaged online backbone features `[B, backbone_dim]` over full, unmasked views.
pub fn extract_backbone_features<T: Scalar>(model: &SimModel<T>, images: &[&Image]) -> Result<Tensor<T>> {
    let patches = patchify::<T>(images, model.cfg.patch_size)?;
    let mut tape = Tape::new();
    let vars = model.online.params.bind(&mut tape, false);
    let mut f = Fwd {
        tape: &mut tape,
        vars: &vars,
        bn: BnMode::Eval(&model.online.bn),
        identity_attention: false,
    };
    let bb = &model.encoder.backbone;
    let x = f.tape.constant(patches);
    let tokens = patch_embed(&mut f, bb, &model.backbone_pos, x)?;
    let h = run_blocks(&mut f, &bb.blocks, tokens)?;
    let h = bb.norm.forward(&mut f, h)?;
    let pooled = f.tape.mean_axis(h, 1, false)?;
    Ok(tape.value(pooled).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_counts() {
        let img = Image::filled(32, 32, [0.0; 3]);
        let p: Tensor<f32> = patchify(&[&img], 4).unwrap();
        assert_eq!(p.shape(), &[1, 64, 48]);
        let big = Image::filled(224, 224, [0.0; 3]);
        let p: Tensor<f32> = patchify(&[&big], 16).unwrap();
        assert_eq!(p.shape()[1], 196);
        assert!(patchify::<f32>(&[&Image::filled(30, 30, [0.0; 3])], 4).is_err());
    }

    #[test]
    fn patch_layout_is_row_major() {
        let mut img = Image::filled(4, 4, [0.0; 3]);
        img.set_pixel(2, 1, [1.0, 2.0, 3.0]);
        let p: Tensor<f64> = patchify(&[&img], 2).unwrap();
        // token (1, 0) = index 2; pixel (0, 1) inside the patch
        assert_eq!(&p.data()[2 * 12 + 3..2 * 12 + 6], &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn ema_endpoints() {
        let s = EmaSchedule::new(0.99, 1.0, 1000).unwrap();
        assert_eq!(ema_momentum(0, &s), 0.99);
        assert_eq!(ema_momentum(1000, &s), 1.0);
        assert!((ema_momentum(500, &s) - 0.995).abs() < 1e-12);
        assert_eq!(ema_momentum(5000, &s), 1.0);
    }

    #[test]
    fn default_model_builds() {
        let m = SimModel::<f32>::new(ModelConfig::default(), 0).unwrap();
        assert!(m.online.params.same_layout(&m.target.params));
        assert_eq!(m.backbone_pos.shape(), &[64, 96]);
    }
}
