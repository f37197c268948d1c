//! Two-view augmentation and random token masking.

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{Result, SimError};
use crate::geometry::CropSpec;
use crate::image::{Image, Normalization};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Fraction of the raw area covered by a crop.
    pub crop_scale: (f64, f64),
    /// Width / height, sampled log-uniformly.
    pub aspect_ratio: (f64, f64),
    pub flip_prob: f64,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
    /// Per view: index 0 is the online (masked) view, index 1 the target view.
    pub blur_prob: [f64; 2],
    pub solarize_prob: [f64; 2],
    pub blur_sigma: (f32, f32),
    pub solarize_threshold: f32,
    pub use_color_aug: bool,
    pub mask_ratio: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale: (0.2, 1.0),
            aspect_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
            blur_prob: [1.0, 0.1],
            solarize_prob: [0.0, 0.2],
            blur_sigma: (0.1, 2.0),
            solarize_threshold: 0.5,
            use_color_aug: true,
            mask_ratio: 0.75,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("aug.flip_prob", self.flip_prob),
            ("aug.jitter_prob", self.jitter_prob),
            ("aug.grayscale_prob", self.grayscale_prob),
            ("aug.blur_prob_a", self.blur_prob[0]),
            ("aug.blur_prob_b", self.blur_prob[1]),
            ("aug.solarize_prob_a", self.solarize_prob[0]),
            ("aug.solarize_prob_b", self.solarize_prob[1]),
        ];
        for (key, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::config(key, format!("probability {p} outside [0, 1]")));
            }
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(SimError::config("aug.mask_ratio", format!("{} not in (0, 1)", self.mask_ratio)));
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(SimError::config("aug.crop_scale", format!("({lo}, {hi}) not within (0, 1]")));
        }
        let (rlo, rhi) = self.aspect_ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(SimError::config("aug.aspect_ratio", format!("({rlo}, {rhi}) is not a positive range")));
        }
        if !(self.blur_sigma.0 > 0.0 && self.blur_sigma.0 <= self.blur_sigma.1) {
            return Err(SimError::config("aug.blur_sigma", "sigma range must be positive and ordered"));
        }
        Ok(())
    }
}

/// Random-resized-crop rectangle; at most ten rejection attempts, then a centre crop.
pub fn sample_crop<R: Rng + ?Sized>(rng: &mut R, raw_h: usize, raw_w: usize, cfg: &AugmentConfig) -> CropSpec {
    let area = (raw_h * raw_w) as f64;
    let (log_lo, log_hi) = (cfg.aspect_ratio.0.ln(), cfg.aspect_ratio.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, cfg.crop_scale.0, cfg.crop_scale.1);
        let ratio = uniform(rng, log_lo, log_hi).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if w == 0 || h == 0 || w > raw_w || h > raw_h {
            continue;
        }
        // Rounding may push the realised area outside the configured range.
        let frac = (w * h) as f64 / area;
        if frac < cfg.crop_scale.0 || frac > cfg.crop_scale.1 {
            continue;
        }
        let top = rng.random_range(0..=raw_h - h);
        let left = rng.random_range(0..=raw_w - w);
        return CropSpec::new(top, left, h, w);
    }
    center_crop(raw_h, raw_w, cfg.aspect_ratio)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn center_crop(raw_h: usize, raw_w: usize, (rlo, rhi): (f64, f64)) -> CropSpec {
    let in_ratio = raw_w as f64 / raw_h as f64;
    let (h, w) = if in_ratio < rlo {
        (((raw_w as f64 / rlo).round() as usize).clamp(1, raw_h), raw_w)
    } else if in_ratio > rhi {
        (raw_h, ((raw_h as f64 * rhi).round() as usize).clamp(1, raw_w))
    } else {
        (raw_h, raw_w)
    };
    CropSpec::new((raw_h - h) / 2, (raw_w - w) / 2, h, w)
}

/// Blur kernel width for a given output size: size / 10 rounded to the nearest odd integer.
pub fn blur_kernel_size(image_size: usize) -> usize {
    let k = (image_size as f64 / 10.0).round() as usize;
    if k <= 1 {
        1
    } else if k.is_multiple_of(2) {
        k + 1
    } else {
        k
    }
}

/// Photometric augmentation in `[0, 1]` pixel space.
///
/// Order: colour jitter, grayscale, Gaussian blur, solarize. `view` selects the
/// per-view blur and solarize probabilities.
pub fn apply_color<R: Rng + ?Sized>(rng: &mut R, image: &Image, view: usize, cfg: &AugmentConfig) -> Image {
    let mut img = image.clone();
    if !cfg.use_color_aug {
        return img;
    }
    if rng.random_bool(cfg.jitter_prob) {
        let mut order = [0u8, 1, 2, 3];
        order.shuffle(rng);
        for op in order {
            match op {
                0 => {
                    let f = jitter_factor(rng, cfg.brightness);
                    img.adjust_brightness(f);
                }
                1 => {
                    let f = jitter_factor(rng, cfg.contrast);
                    img.adjust_contrast(f);
                }
                2 => {
                    let f = jitter_factor(rng, cfg.saturation);
                    img.adjust_saturation(f);
                }
                _ => {
                    if cfg.hue > 0.0 {
                        let s = rng.random_range(-cfg.hue..=cfg.hue);
                        img.adjust_hue(s);
                    }
                }
            }
        }
    }
    if rng.random_bool(cfg.grayscale_prob) {
        img = img.grayscale();
    }
    if rng.random_bool(cfg.blur_prob[view]) {
        let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        let k = blur_kernel_size(img.height.max(img.width));
        if k > 1 {
            img.gaussian_blur(k, sigma);
        }
    }
    if rng.random_bool(cfg.solarize_prob[view]) {
        img.solarize(cfg.solarize_threshold);
    }
    img.clamp_unit();
    img
}

fn jitter_factor<R: Rng + ?Sized>(rng: &mut R, strength: f32) -> f32 {
    if strength <= 0.0 {
        return 1.0;
    }
    rng.random_range((1.0 - strength).max(0.0)..=1.0 + strength)
}

/// Which tokens of the online view stay visible.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPattern {
    visible: Vec<usize>,
    total: usize,
}

impl MaskPattern {
    pub fn new(mut visible: Vec<usize>, total: usize) -> Result<Self> {
        visible.sort_unstable();
        visible.dedup();
        if visible.is_empty() || visible.last().is_some_and(|&v| v >= total) {
            return Err(SimError::invalid("mask", format!("visible set invalid for {total} tokens")));
        }
        Ok(MaskPattern { visible, total })
    }

    /// Every token visible.
    pub fn full(total: usize) -> Self {
        MaskPattern {
            visible: (0..total).collect(),
            total,
        }
    }

    pub fn visible(&self) -> &[usize] {
        &self.visible
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn num_visible(&self) -> usize {
        self.visible.len()
    }
}

pub fn visible_count(total: usize, mask_ratio: f64) -> usize {
    ((1.0 - mask_ratio) * total as f64).round() as usize
}

/// Uniform fixed-count masking: exactly `round((1 - ratio) N)` visible tokens.
pub fn sample_mask<R: Rng + ?Sized>(rng: &mut R, total: usize, mask_ratio: f64) -> Result<MaskPattern> {
    if total == 0 {
        return Err(SimError::invalid("sample_mask", "no tokens"));
    }
    let keep = visible_count(total, mask_ratio);
    if keep == 0 {
        return Err(SimError::invalid(
            "sample_mask",
            format!("ratio {mask_ratio} leaves no visible token out of {total}"),
        ));
    }
    let keep = keep.min(total);
    let visible = index::sample(rng, total, keep).into_vec();
    MaskPattern::new(visible, total)
}

/// Two augmented views of one raw image plus the mask for the online view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub image_a: Image,
    pub image_b: Image,
    pub crop_a: CropSpec,
    pub crop_b: CropSpec,
    pub mask: MaskPattern,
}

/// Builds a view pair at `size x size` resolution with a mask over `num_tokens` tokens.
///
/// One horizontal flip decision is shared by both views and applied to the raw image
/// before cropping, so crop rectangles live in a common coordinate frame.
pub fn make_view_pair<R: Rng + ?Sized>(
    rng: &mut R,
    raw: &Image,
    cfg: &AugmentConfig,
    same_view: bool,
    size: usize,
    num_tokens: usize,
    norm: &Normalization,
) -> Result<ViewPair> {
    let flipped = rng.random_bool(cfg.flip_prob);
    let base = if flipped { raw.flip_horizontal() } else { raw.clone() };
    let view = |rng: &mut R, index: usize| -> (CropSpec, Image) {
        let mut crop = sample_crop(rng, base.height, base.width, cfg);
        crop.flipped = flipped;
        let pixels = base.crop(crop.top, crop.left, crop.height, crop.width).resize(size, size);
        let mut img = apply_color(rng, &pixels, index, cfg);
        img.normalize(norm);
        (crop, img)
    };
    let (crop_a, image_a) = view(rng, 0);
    let (crop_b, image_b) = if same_view {
        (crop_a, image_a.clone())
    } else {
        view(rng, 1)
    };
    let mask = sample_mask(rng, num_tokens, cfg.mask_ratio)?;
    Ok(ViewPair {
        image_a,
        image_b,
        crop_a,
        crop_b,
        mask,
    })
}

/// Resize + normalise only; used for frozen-feature evaluation.
pub fn eval_view(raw: &Image, size: usize, norm: &Normalization) -> Image {
    let mut img = raw.resize(size, size);
    img.normalize(norm);
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forced_full_crop() {
        let cfg = AugmentConfig {
            crop_scale: (1.0, 1.0),
            aspect_ratio: (1.0, 1.0),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_crop(&mut rng, 64, 64, &cfg), CropSpec::full(64, 64));
    }

    #[test]
    fn unsatisfiable_request_falls_back_to_center_crop() {
        let cfg = AugmentConfig {
            crop_scale: (0.9999, 1.0),
            aspect_ratio: (4.0 / 3.0, 4.0 / 3.0),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = sample_crop(&mut rng, 8, 8, &cfg);
        // width-limited: w = 8, h = round(8 / (4/3)) = 6, centred vertically
        assert_eq!(c, CropSpec::new(1, 0, 6, 8));
    }

    #[test]
    fn crop_area_fractions_stay_in_range() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let c = sample_crop(&mut rng, 224, 224, &cfg);
            assert!(c.fits_within(224, 224));
            let frac = (c.height * c.width) as f64 / (224.0 * 224.0);
            assert!((0.2..=1.0).contains(&frac), "{frac}");
        }
    }

    #[test]
    fn disabled_color_aug_is_bit_exact() {
        let cfg = AugmentConfig {
            use_color_aug: false,
            ..Default::default()
        };
        let img = Image::new(2, 2, (0..12).map(|v| v as f32 / 13.0).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(apply_color(&mut rng, &img, 0, &cfg), img);
    }

    #[test]
    fn forced_grayscale_equalises_channels() {
        let cfg = AugmentConfig {
            jitter_prob: 0.0,
            grayscale_prob: 1.0,
            blur_prob: [0.0, 0.0],
            solarize_prob: [0.0, 0.0],
            ..Default::default()
        };
        let img = Image::new(1, 2, vec![0.9, 0.1, 0.3, 0.2, 0.7, 0.4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = apply_color(&mut rng, &img, 0, &cfg);
        for px in g.data.chunks_exact(3) {
            assert_eq!(px[0], px[1]);
            assert_eq!(px[1], px[2]);
        }
        assert!((g.data[0] - (0.299 * 0.9 + 0.587 * 0.1 + 0.114 * 0.3)).abs() < 1e-6);
    }

    #[test]
    fn mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(sample_mask(&mut rng, 196, 0.75).unwrap().num_visible(), 49);
        assert_eq!(sample_mask(&mut rng, 4, 0.5).unwrap().num_visible(), 2);
        assert!(sample_mask(&mut rng, 4, 0.9).is_err());
    }

    #[test]
    fn blur_kernel_is_odd() {
        assert_eq!(blur_kernel_size(32), 3);
        assert_eq!(blur_kernel_size(224), 23);
        assert_eq!(blur_kernel_size(8), 1);
    }
}
