//! Image datasets: the on-disk manifest format and a procedural shapes generator.
//!
//! A dataset directory holds `manifest.tsv` with one `relative_path<TAB>label` line per
//! image. Lines starting with `#` carry metadata, e.g. `# mean=0.5,0.5,0.5` and
//! `# std=0.25,0.25,0.25` for the per-channel normalisation constants.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SimError};
use crate::image::{Image, Normalization};

pub const MANIFEST: &str = "manifest.tsv";

#[derive(Clone, Debug)]
pub struct Sample {
    pub path: PathBuf,
    pub label: usize,
    pub image: Image,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub norm: Normalization,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.samples.iter().map(|s| s.label + 1).max().unwrap_or(0)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Loads every image listed in `dir/manifest.tsv` into memory.
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&manifest).map_err(|e| SimError::io(&manifest, e))?;
        let mut mean = None;
        let mut std = None;
        let mut samples = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((key, value)) = meta.trim().split_once('=') {
                    match key.trim() {
                        "mean" => mean = Some(parse_triple(value, &manifest, lineno)?),
                        "std" => std = Some(parse_triple(value, &manifest, lineno)?),
                        _ => {}
                    }
                }
                continue;
            }
            let (rel, label) = line.split_once('\t').ok_or_else(|| {
                SimError::Data(format!("{}:{}: expected `path<TAB>label`", manifest.display(), lineno + 1))
            })?;
            let label: usize = label.trim().parse().map_err(|_| {
                SimError::Data(format!("{}:{}: bad label `{label}` for sample {rel}", manifest.display(), lineno + 1))
            })?;
            let path = dir.join(rel);
            let image = Image::read_ppm(&path).map_err(|e| SimError::Data(format!("sample {rel}: {e}")))?;
            if image.height < 8 || image.width < 8 {
                return Err(SimError::Data(format!(
                    "sample {rel}: {}x{} is smaller than 8x8",
                    image.height, image.width
                )));
            }
            samples.push(Sample { path, label, image });
        }
        let norm = match (mean, std) {
            (Some(mean), Some(std)) => Normalization { mean, std },
            _ => Normalization::from_images(samples.iter().map(|s| &s.image)),
        };
        Ok(Dataset { samples, norm })
    }
}

fn parse_triple(value: &str, manifest: &Path, lineno: usize) -> Result<[f32; 3]> {
    let parts: Vec<f32> = value
        .split(',')
        .map(|p| p.trim().parse::<f32>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| SimError::Data(format!("{}:{}: bad channel triple `{value}`", manifest.display(), lineno + 1)))?;
    parts
        .try_into()
        .map_err(|_| SimError::Data(format!("{}:{}: expected 3 channel values", manifest.display(), lineno + 1)))
}

/// Writes images and a manifest (including normalisation metadata) into `dir`.
pub fn write_dataset(dir: &Path, images: &[(Image, usize)]) -> Result<Normalization> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| SimError::io(&img_dir, e))?;
    let norm = Normalization::from_images(images.iter().map(|(img, _)| img));
    let mut manifest = String::new();
    let triple = |v: [f32; 3]| format!("{},{},{}", v[0], v[1], v[2]);
    writeln!(manifest, "# mean={}", triple(norm.mean)).unwrap();
    writeln!(manifest, "# std={}", triple(norm.std)).unwrap();
    for (i, (img, label)) in images.iter().enumerate() {
        let rel = format!("images/{i:05}.ppm");
        img.write_ppm(&dir.join(&rel))?;
        writeln!(manifest, "{rel}\t{label}").unwrap();
    }
    let path = dir.join(MANIFEST);
    std::fs::write(&path, manifest).map_err(|e| SimError::io(&path, e))?;
    Ok(norm)
}

/// Procedural coloured shapes. The class is the shape; colours, size, position and
/// rotation are nuisance factors drawn independently of the class.
#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub size: usize,
    pub seed: u64,
}

pub const SHAPE_NAMES: [&str; 6] = ["circle", "square", "triangle", "cross", "ring", "bar"];

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 4,
            size: 32,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// `count` images with balanced labels; `stream` separates train and test draws.
    pub fn generate(&self, count: usize, stream: u64) -> Result<Vec<(Image, usize)>> {
        if self.num_classes < 2 || self.num_classes > SHAPE_NAMES.len() {
            return Err(SimError::config(
                "synthetic.classes",
                format!("{} not in 2..={}", self.num_classes, SHAPE_NAMES.len()),
            ));
        }
        if self.size < 8 {
            return Err(SimError::config("synthetic.size", "images must be at least 8x8"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        Ok((0..count)
            .map(|i| {
                let label = i % self.num_classes;
                (render_shape(&mut rng, label, self.size), label)
            })
            .collect())
    }
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn color_distance(a: [f32; 3], b: [f32; 3]) -> f32 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

/// Signed inside test in the shape's unit frame (rotation and scale already removed).
fn inside(label: usize, x: f32, y: f32) -> bool {
    match label {
        0 => x * x + y * y <= 1.0,
        1 => x.abs() <= 0.8 && y.abs() <= 0.8,
        2 => {
            // Upward triangle with vertices at (0,-1), (-0.95,0.7), (0.95,0.7).
            (-1.0..=0.7).contains(&y) && x.abs() <= 0.95 * (y + 1.0) / 1.7
        }
        3 => (x.abs() <= 0.3 && y.abs() <= 1.0) || (y.abs() <= 0.3 && x.abs() <= 1.0),
        4 => {
            let r2 = x * x + y * y;
            (0.4..=1.0).contains(&r2)
        }
        _ => x.abs() <= 1.0 && y.abs() <= 0.25,
    }
}

fn render_shape<R: Rng + ?Sized>(rng: &mut R, label: usize, size: usize) -> Image {
    let bg = random_color(rng);
    let mut fg = random_color(rng);
    while color_distance(bg, fg) < 0.4 {
        fg = random_color(rng);
    }
    let s = size as f32;
    let radius = rng.random_range(0.22 * s..0.38 * s);
    let cx = rng.random_range(radius..s - radius);
    let cy = rng.random_range(radius..s - radius);
    let angle: f32 = rng.random_range(-0.35..0.35);
    let (sin, cos) = angle.sin_cos();
    let noise = 0.04;
    let mut img = Image::filled(size, size, bg);
    const SS: usize = 4;
    for py in 0..size {
        for px in 0..size {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let x = px as f32 + (sx as f32 + 0.5) / SS as f32 - cx;
                    let y = py as f32 + (sy as f32 + 0.5) / SS as f32 - cy;
                    let (u, v) = ((cos * x + sin * y) / radius, (-sin * x + cos * y) / radius);
                    hits += usize::from(inside(label, u, v));
                }
            }
            let a = hits as f32 / (SS * SS) as f32;
            let mut rgb = [0.0; 3];
            for c in 0..3 {
                let jitter = rng.random_range(-noise..noise);
                rgb[c] = (a * fg[c] + (1.0 - a) * bg[c] + jitter).clamp(0.0, 1.0);
            }
            img.set_pixel(py, px, rgb);
        }
    }
    img
}

/// Generates `train/` and `test/` shape datasets under `out`.
pub fn generate_synthetic(out: &Path, cfg: &SyntheticConfig, train: usize, test: usize) -> Result<()> {
    write_dataset(&out.join("train"), &cfg.generate(train, 0)?)?;
    write_dataset(&out.join("test"), &cfg.generate(test, 1)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig::default();
        let imgs = cfg.generate(8, 0).unwrap();
        let norm = write_dataset(dir.path(), &imgs).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.len(), 8);
        assert_eq!(ds.num_classes(), 4);
        assert_eq!(ds.labels(), vec![0, 1, 2, 3, 0, 1, 2, 3]);
        for c in 0..3 {
            assert!((ds.norm.mean[c] - norm.mean[c]).abs() < 1e-6);
        }
        // 8-bit quantisation is the only loss.
        for (s, (img, _)) in ds.samples.iter().zip(&imgs) {
            assert!(s.image.max_abs_diff(img) <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn generator_is_seeded() {
        let cfg = SyntheticConfig::default();
        assert_eq!(cfg.generate(3, 0).unwrap()[2].0, cfg.generate(3, 0).unwrap()[2].0);
        assert_ne!(cfg.generate(1, 0).unwrap()[0].0, cfg.generate(1, 1).unwrap()[0].0);
    }

    #[test]
    fn broken_sample_is_named() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(MANIFEST), "missing.ppm\t0\n").unwrap();
        let err = Dataset::open(dir.path()).unwrap_err().to_string();
        assert!(err.contains("missing.ppm"), "{err}");
    }
}
