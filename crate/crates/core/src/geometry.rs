//! Decoder positional embeddings for cross-view prediction.
//!
//! Positions of view-a tokens are plain grid indices. Mask tokens standing for view b
//! are placed in view a's token coordinate frame by mapping b's grid through both
//! crop rectangles, and carry an extra encoding of the relative scale between views.

use crate::error::{Result, SimError};
use crate::tensor::{Scalar, Tensor};

/// A view rectangle in raw-image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CropSpec {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    /// Horizontal flip applied to the raw image before cropping.
    pub flipped: bool,
}

impl CropSpec {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        CropSpec {
            top,
            left,
            height,
            width,
            flipped: false,
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::new(0, 0, height, width)
    }

    pub fn fits_within(&self, raw_h: usize, raw_w: usize) -> bool {
        self.height > 0 && self.width > 0 && self.top + self.height <= raw_h && self.left + self.width <= raw_w
    }

    fn check_extent(&self, op: &'static str) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(SimError::invalid(op, format!("crop has zero extent: {self:?}")));
        }
        Ok(())
    }
}

/// Token grid of a view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(SimError::invalid("grid", format!("empty grid {rows}x{cols}")));
        }
        Ok(GridSpec { rows, cols })
    }

    pub fn square(n: usize) -> Result<Self> {
        Self::new(n, n)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Zero-based (row, col) of a row-major token index.
    pub fn coords(&self, token: usize) -> (usize, usize) {
        (token / self.cols, token % self.cols)
    }
}

/// Position pair `(along height, along width)` in token units.
pub type Position = [f64; 2];

/// Grid positions of view-a tokens: token (u, v) sits at (u-1, v-1), row-major.
pub fn grid_positions_a(grid: GridSpec) -> Vec<Position> {
    (0..grid.len())
        .map(|t| {
            let (r, c) = grid.coords(t);
            [r as f64, c as f64]
        })
        .collect()
}

/// Positions of view-b tokens expressed in view a's token frame.
pub fn relative_positions_b(crop_a: &CropSpec, crop_b: &CropSpec, grid: GridSpec) -> Result<Vec<Position>> {
    crop_a.check_extent("relative_positions_b")?;
    let (h1, w1) = (crop_a.height as f64, crop_a.width as f64);
    let (h2, w2) = (crop_b.height as f64, crop_b.width as f64);
    let (nh, nw) = (grid.rows as f64, grid.cols as f64);
    let dy = (crop_b.top as f64 - crop_a.top as f64) / h1 * nh;
    let dx = (crop_b.left as f64 - crop_a.left as f64) / w1 * nw;
    let (sy, sx) = (h2 / h1, w2 / w1);
    Ok((0..grid.len())
        .map(|t| {
            let (r, c) = grid.coords(t);
            // Exact degeneracy for identical crops: sy == 1 and dy == 0.
            [sy * r as f64 + dy, sx * c as f64 + dx]
        })
        .collect())
}

/// `(k log(h2/h1), k log(w2/w1))` with `k = 10` and the configured log base.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleEncoding {
    pub multiplier: f64,
    pub log_base: f64,
}

impl Default for ScaleEncoding {
    fn default() -> Self {
        ScaleEncoding {
            multiplier: 10.0,
            log_base: 10.0,
        }
    }
}

pub fn relative_scale(crop_a: &CropSpec, crop_b: &CropSpec) -> Result<Position> {
    relative_scale_with(crop_a, crop_b, ScaleEncoding::default())
}

pub fn relative_scale_with(crop_a: &CropSpec, crop_b: &CropSpec, enc: ScaleEncoding) -> Result<Position> {
    crop_a.check_extent("relative_scale")?;
    crop_b.check_extent("relative_scale")?;
    let f = |r: f64| enc.multiplier * r.log(enc.log_base);
    Ok([
        f(crop_b.height as f64 / crop_a.height as f64),
        f(crop_b.width as f64 / crop_a.width as f64),
    ])
}

/// 2-D sine-cosine encoding: first half encodes the height coordinate, second half the
/// width coordinate, each as interleaved `(sin(p/w_k), cos(p/w_k))` with
/// `w_k = 10000^(4k/dim)`.
pub fn sincos_pe(position: Position, dim: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; dim];
    sincos_pe_into(position, dim, &mut out)?;
    Ok(out)
}

fn sincos_pe_into(position: Position, dim: usize, out: &mut [f64]) -> Result<()> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(SimError::invalid("sincos_pe", format!("dimension {dim} is not a positive multiple of 4")));
    }
    let quarter = dim / 4;
    for (axis, &p) in position.iter().enumerate() {
        let half = &mut out[axis * dim / 2..(axis + 1) * dim / 2];
        for k in 0..quarter {
            let omega = 10000f64.powf(4.0 * k as f64 / dim as f64);
            let (s, c) = (p / omega).sin_cos();
            half[2 * k] = s;
            half[2 * k + 1] = c;
        }
    }
    Ok(())
}

/// Encodes a list of positions as an `[n, dim]` table.
pub fn sincos_table<T: Scalar>(positions: &[Position], dim: usize) -> Result<Tensor<T>> {
    let mut data = vec![0.0; positions.len() * dim];
    for (p, row) in positions.iter().zip(data.chunks_exact_mut(dim)) {
        sincos_pe_into(*p, dim, row)?;
    }
    Tensor::from_f64([positions.len(), dim], &data)
}

/// Learnable map from `[PE(p_b), PE(s)]` (2D wide) to the decoder width D.
#[derive(Clone, Debug)]
pub struct ScaleMixer<T> {
    /// `[2D, D]`
    pub weight: Tensor<T>,
    /// `[D]`
    pub bias: Tensor<T>,
}

impl<T: Scalar> ScaleMixer<T> {
    /// Copies the position half through unchanged and ignores the scale half.
    pub fn selecting(dim: usize) -> Self {
        let mut w = Tensor::zeros([2 * dim, dim]);
        for i in 0..dim {
            w.data_mut()[i * dim + i] = T::one();
        }
        ScaleMixer {
            weight: w,
            bias: Tensor::zeros([dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.numel()
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.weight.shape() != [2 * dim, dim] || self.bias.shape() != [dim] {
            return Err(SimError::shape("scale_mixer", self.weight.shape(), &[2 * dim, dim]));
        }
        Ok(())
    }

    pub fn apply(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let dim = self.dim();
        self.validate(dim)?;
        if input.rank() != 2 || input.shape()[1] != 2 * dim {
            return Err(SimError::shape("scale_mixer", input.shape(), self.weight.shape()));
        }
        let rows = input.shape()[0];
        let mut out = vec![T::zero(); rows * dim];
        crate::tensor::gemm(
            crate::tensor::MatRef::new(input.data(), rows, 2 * dim),
            crate::tensor::MatRef::new(self.weight.data(), 2 * dim, dim),
            T::zero(),
            &mut out,
        );
        for row in out.chunks_exact_mut(dim) {
            for (v, &b) in row.iter_mut().zip(self.bias.data()) {
                *v = *v + b;
            }
        }
        Tensor::new([rows, dim], out)
    }
}

/// `[N, 2D]` mixer input for view b: each row is `[PE(p_b(u,v)), PE(s)]`.
pub fn mask_token_pos_input<T: Scalar>(crop_a: &CropSpec, crop_b: &CropSpec, grid: GridSpec, dim: usize, enc: ScaleEncoding) -> Result<Tensor<T>> {
    let positions = relative_positions_b(crop_a, crop_b, grid)?;
    let scale = sincos_pe(relative_scale_with(crop_a, crop_b, enc)?, dim)?;
    let mut data = vec![0.0; grid.len() * 2 * dim];
    for (p, row) in positions.iter().zip(data.chunks_exact_mut(2 * dim)) {
        sincos_pe_into(*p, dim, &mut row[..dim])?;
        row[dim..].copy_from_slice(&scale);
    }
    Tensor::from_f64([grid.len(), 2 * dim], &data)
}

/// Both decoder embedding tables: `p_a` (`[N, D]`, grid encoding) and `p_b` (`[N, D]`,
/// mixer applied to relative position and scale encodings).
pub fn decoder_pos_embeds<T: Scalar>(crop_a: &CropSpec, crop_b: &CropSpec, grid: GridSpec, dim: usize, mixer: &ScaleMixer<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if mixer.dim() != dim {
        return Err(SimError::shape("decoder_pos_embeds", &[mixer.dim()], &[dim]));
    }
    let p_a = sincos_table(&grid_positions_a(grid), dim)?;
    let input = mask_token_pos_input(crop_a, crop_b, grid, dim, ScaleEncoding::default())?;
    Ok((p_a, mixer.apply(&input)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_positions_small() {
        let p = grid_positions_a(GridSpec::square(2).unwrap());
        assert_eq!(p, vec![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]]);
        let row = grid_positions_a(GridSpec::new(1, 3).unwrap());
        assert_eq!(row, vec![[0.0, 0.0], [0.0, 1.0], [0.0, 2.0]]);
        let big = grid_positions_a(GridSpec::square(14).unwrap());
        assert_eq!(big[0], [0.0, 0.0]);
        assert_eq!(big[195], [13.0, 13.0]);
    }

    #[test]
    fn shifted_crop_lands_at_seven() {
        let a = CropSpec::new(0, 0, 100, 100);
        let b = CropSpec::new(50, 50, 100, 100);
        let p = relative_positions_b(&a, &b, GridSpec::square(14).unwrap()).unwrap();
        assert_eq!(p[0], [7.0, 7.0]);
    }

    #[test]
    fn half_size_crop_compresses_positions() {
        let a = CropSpec::new(0, 0, 200, 200);
        let b = CropSpec::new(0, 0, 100, 100);
        let g = GridSpec::square(14).unwrap();
        let p = relative_positions_b(&a, &b, g).unwrap();
        // token (u=3, v=1)
        assert_eq!(p[2 * 14], [1.0, 0.0]);
    }

    #[test]
    fn zero_extent_reference_crop_is_rejected() {
        let a = CropSpec::new(0, 0, 0, 10);
        let b = CropSpec::new(0, 0, 10, 10);
        assert!(relative_positions_b(&a, &b, GridSpec::square(2).unwrap()).is_err());
        assert!(relative_scale(&b, &a).is_err());
    }

    #[test]
    fn relative_scale_examples() {
        let a = CropSpec::new(0, 0, 10, 10);
        assert_eq!(relative_scale(&a, &a).unwrap(), [0.0, 0.0]);
        let b = CropSpec::new(0, 0, 100, 100);
        let s = relative_scale(&a, &b).unwrap();
        assert!((s[0] - 10.0).abs() < 1e-12 && (s[1] - 10.0).abs() < 1e-12);
        let c = CropSpec::new(0, 0, 20, 5);
        let s = relative_scale(&a, &c).unwrap();
        assert!((s[0] - 3.010_299_956_639_812).abs() < 1e-9);
        assert!((s[1] + 3.010_299_956_639_812).abs() < 1e-9);
    }

    #[test]
    fn sincos_examples() {
        let z = sincos_pe([0.0, 0.0], 8).unwrap();
        assert_eq!(z, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let p = sincos_pe([1.0, 0.0], 8).unwrap();
        assert!((p[0] - 0.841_470_984_807_9).abs() < 1e-12);
        assert!((p[1] - 0.540_302_305_868_1).abs() < 1e-12);
        assert!(sincos_pe([0.0, 0.0], 6).is_err());
        let q = sincos_pe([37.5, -12.25], 64).unwrap();
        assert!(q.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn selecting_mixer_reproduces_grid_embedding() {
        let a = CropSpec::new(3, 5, 40, 30);
        let g = GridSpec::square(4).unwrap();
        let mixer = ScaleMixer::<f64>::selecting(16);
        let (pa, pb) = decoder_pos_embeds(&a, &a, g, 16, &mixer).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn paper_scale_table_shapes() {
        let a = CropSpec::new(0, 0, 224, 224);
        let b = CropSpec::new(10, 20, 150, 180);
        let mixer = ScaleMixer::<f32>::selecting(512);
        let (pa, pb) = decoder_pos_embeds(&a, &b, GridSpec::square(14).unwrap(), 512, &mixer).unwrap();
        assert_eq!(pa.shape(), &[196, 512]);
        assert_eq!(pb.shape(), &[196, 512]);
    }

    #[test]
    fn mixer_dimension_mismatch_is_an_error() {
        let a = CropSpec::new(0, 0, 8, 8);
        let mixer = ScaleMixer::<f64>::selecting(8);
        assert!(decoder_pos_embeds(&a, &a, GridSpec::square(2).unwrap(), 16, &mixer).is_err());
    }
}
