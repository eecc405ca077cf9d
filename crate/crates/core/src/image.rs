//! Image and depth-map value types and the replicate-border 2-D convolution
//! every filter in the crate is built on.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Row-major `height × width × channels` field of intensities, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "image must be at least 1x1, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidValue(format!(
                "image channels must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "expected {} values for {height}x{width}x{channels}, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("non-finite intensity at flat index {i}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds an image from a per-pixel function `f(row, col, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub(crate) fn from_parts_unchecked(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Single-channel luma (`0.299 R + 0.587 G + 0.114 B`); a copy for grayscale input.
    pub fn luma(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|px| 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2])
            .collect();
        Image::from_parts_unchecked(self.height, self.width, 1, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Image> {
        Image::new(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }
}

/// Metric depth bounds shared by every depth-valued field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthRange {
    pub min: f64,
    pub max: f64,
}

impl Default for DepthRange {
    fn default() -> Self {
        Self { min: 0.7, max: 10.0 }
    }
}

impl DepthRange {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        let range = Self { min, max };
        range.validate()?;
        Ok(range)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min > 0.0 && self.min < self.max) {
            return Err(Error::InvalidValue(format!(
                "depth range needs 0 < min < max, got [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn contains(&self, depth: f64) -> bool {
        depth >= self.min && depth <= self.max
    }
}

/// Row-major `height × width` field of metric depths in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "depth map must be at least 1x1, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "expected {} depths for {height}x{width}, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::InvalidValue(format!(
                "depth at flat index {i} is {} (must be finite and positive)",
                data[i]
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, depth: f64) -> Result<Self> {
        Self::new(height, width, vec![depth; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn matches(&self, img: &Image) -> bool {
        self.height == img.height() && self.width == img.width()
    }

    pub fn check_range(&self, range: &DepthRange) -> Result<()> {
        match self.data.iter().position(|&d| !range.contains(d)) {
            Some(i) => Err(Error::Domain(format!(
                "depth {} at row {}, col {} outside [{}, {}]",
                self.data[i],
                i / self.width,
                i % self.width,
                range.min,
                range.max
            ))),
            None => Ok(()),
        }
    }

    /// Clamps into `range`, returning the number of pixels that moved.
    pub fn clamp_to(&mut self, range: &DepthRange) -> usize {
        let mut moved = 0;
        for d in &mut self.data {
            let c = d.clamp(range.min, range.max);
            if c != *d {
                *d = c;
                moved += 1;
            }
        }
        moved
    }
}

/// Square stencil of `(2·radius + 1)²` weights, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    radius: usize,
    weights: Vec<f64>,
}

impl Kernel {
    pub fn new(radius: usize, weights: Vec<f64>) -> Result<Self> {
        let side = 2 * radius + 1;
        if weights.len() != side * side {
            return Err(Error::Dimension(format!(
                "kernel of radius {radius} needs {} weights, got {}",
                side * side,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidValue("kernel weights must be finite".into()));
        }
        Ok(Self { radius, weights })
    }

    pub fn identity() -> Self {
        Self {
            radius: 0,
            weights: vec![1.0],
        }
    }

    /// Mean filter over a `(2r+1)²` window.
    pub fn box_filter(radius: usize) -> Self {
        let side = 2 * radius + 1;
        let n = side * side;
        Self {
            radius,
            weights: vec![1.0 / n as f64; n],
        }
    }

    /// 4-neighbour Laplacian `[0,1,0; 1,-4,1; 0,1,0]`.
    pub fn laplacian() -> Self {
        Self {
            radius: 1,
            weights: vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0],
        }
    }

    /// Normalized Gaussian truncated at `radius`.
    pub fn gaussian_with_radius(sigma: f64, radius: usize) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidValue(format!(
                "gaussian sigma must be positive, got {sigma}"
            )));
        }
        let side = 2 * radius + 1;
        let r = radius as isize;
        let mut weights = Vec::with_capacity(side * side);
        for dy in -r..=r {
            for dx in -r..=r {
                let d2 = (dx * dx + dy * dy) as f64;
                weights.push((-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
        let sum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= sum);
        Ok(Self { radius, weights })
    }

    /// Normalized Gaussian truncated at `⌈3σ⌉`.
    pub fn gaussian(sigma: f64) -> Result<Self> {
        let radius = if sigma > 0.0 { (3.0 * sigma).ceil() as usize } else { 0 };
        Self::gaussian_with_radius(sigma, radius)
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Applies `kernel` with edge replication: `out(x) = Σ_k kernel(k) · img(clamp(x + k))`.
///
/// The kernel is applied unflipped; every stencil the crate ships is point-symmetric.
/// Rows are computed independently, so the result does not depend on the thread count.
pub fn convolve2d(img: &Image, kernel: &Kernel) -> Result<Image> {
    let (h, w, ch) = (img.height, img.width, img.channels);
    let r = kernel.radius;
    if r >= h.min(w) {
        return Err(Error::Dimension(format!(
            "kernel radius {r} must be smaller than the image's shorter side ({})",
            h.min(w)
        )));
    }
    let side = 2 * r + 1;
    let ri = r as isize;
    let mut out = vec![0.0; h * w * ch];
    out.par_chunks_mut(w * ch).enumerate().for_each(|(row, out_row)| {
        for col in 0..w {
            let px = &mut out_row[col * ch..(col + 1) * ch];
            for ky in 0..side {
                let sr = (row as isize + ky as isize - ri).clamp(0, h as isize - 1) as usize;
                for kx in 0..side {
                    let wgt = kernel.weights[ky * side + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let sc = (col as isize + kx as isize - ri).clamp(0, w as isize - 1) as usize;
                    let src = (sr * w + sc) * ch;
                    for (c, p) in px.iter_mut().enumerate() {
                        *p += wgt * img.data[src + c];
                    }
                }
            }
        }
    });
    Ok(Image::from_parts_unchecked(h, w, ch, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp5() -> Image {
        Image::from_fn(5, 5, 1, |r, c, _| (r * 5 + c) as f64 / 24.0).unwrap()
    }

    #[test]
    fn rejects_bad_images() {
        assert!(Image::new(0, 3, 1, vec![]).is_err());
        assert!(Image::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(Image::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Image::new(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(DepthMap::new(1, 2, vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn laplacian_annihilates_constants() {
        let img = Image::filled(7, 9, 3, 0.37).unwrap();
        let out = convolve2d(&img, &Kernel::laplacian()).unwrap();
        assert!(out.data().iter().all(|&v| v.abs() < 1e-15));
        assert!(Kernel::laplacian().sum().abs() < 1e-12);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let img = Image::from_fn(6, 4, 3, |r, c, ch| ((r * 31 + c * 7 + ch) % 11) as f64 / 10.0).unwrap();
        assert_eq!(convolve2d(&img, &Kernel::identity()).unwrap(), img);
    }

    #[test]
    fn box_filter_interior_matches_hand_sum() {
        let img = ramp5();
        let out = convolve2d(&img, &Kernel::box_filter(1)).unwrap();
        // Pixel (2,1): rows 1..=3, cols 0..=2 of the ramp.
        let mut hand = 0.0;
        for r in 1..=3 {
            for c in 0..=2 {
                hand += (r * 5 + c) as f64 / 24.0;
            }
        }
        hand /= 9.0;
        assert!((out.get(2, 1, 0) - hand).abs() < 1e-15);
        assert!((hand - 11.0 / 24.0).abs() < 1e-15);
    }

    #[test]
    fn replicate_border_on_corner() {
        let img = ramp5();
        let out = convolve2d(&img, &Kernel::box_filter(1)).unwrap();
        // Corner (0,0) sees rows {0,0,1} x cols {0,0,1}.
        let v = |r: usize, c: usize| (r * 5 + c) as f64 / 24.0;
        let hand = (4.0 * v(0, 0) + 2.0 * v(0, 1) + 2.0 * v(1, 0) + v(1, 1)) / 9.0;
        assert!((out.get(0, 0, 0) - hand).abs() < 1e-15);
    }

    #[test]
    fn oversized_kernel_is_dimension_error() {
        let img = Image::filled(3, 8, 1, 0.5).unwrap();
        assert!(matches!(
            convolve2d(&img, &Kernel::box_filter(3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn gaussian_kernels_are_normalized() {
        for sigma in [0.25, 1.0, 2.0, 7.3] {
            let k = Kernel::gaussian(sigma).unwrap();
            assert!((k.sum() - 1.0).abs() < 1e-9);
            assert_eq!(k.radius(), (3.0 * sigma).ceil() as usize);
        }
    }

    #[test]
    fn luma_weights() {
        let img = Image::new(1, 1, 3, vec![1.0, 0.5, 0.25]).unwrap();
        assert!((img.luma().get(0, 0, 0) - (0.299 + 0.2935 + 0.0285)).abs() < 1e-15);
    }

    fn flip(img: &Image) -> Image {
        Image::from_fn(img.height(), img.width(), img.channels(), |r, c, ch| {
            img.get(r, img.width() - 1 - c, ch)
        })
        .unwrap()
    }

    proptest! {
        #[test]
        fn convolution_is_linear(
            xs in proptest::collection::vec(0.0f64..1.0, 256),
            ys in proptest::collection::vec(0.0f64..1.0, 256),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let x = Image::new(16, 16, 1, xs).unwrap();
            let y = Image::new(16, 16, 1, ys).unwrap();
            let k = Kernel::gaussian(1.3).unwrap();
            let combo = Image::new(16, 16, 1,
                x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
            let lhs = convolve2d(&combo, &k).unwrap();
            let cx = convolve2d(&x, &k).unwrap();
            let cy = convolve2d(&y, &k).unwrap();
            for i in 0..256 {
                let rhs = a * cx.data()[i] + b * cy.data()[i];
                prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-10);
            }
        }

        #[test]
        fn symmetric_kernel_commutes_with_flip(xs in proptest::collection::vec(0.0f64..1.0, 12 * 12)) {
            let x = Image::new(12, 12, 1, xs).unwrap();
            let k = Kernel::gaussian(0.9).unwrap();
            let a = convolve2d(&flip(&x), &k).unwrap();
            let b = flip(&convolve2d(&x, &k).unwrap());
            // The replicate border is mirror-consistent, so this holds on the whole frame;
            // the interior crop is what the property strictly requires.
            let r = k.radius();
            for row in r..12 - r {
                for col in r..12 - r {
                    prop_assert!((a.get(row, col, 0) - b.get(row, col, 0)).abs() <= 1e-12);
                }
            }
        }
    }
}
