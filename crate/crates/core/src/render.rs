//! Differentiable focal stack renderer.
//!
//! Each source pixel `y` spreads its intensity with a normalized, truncated
//! Gaussian whose width `σ(y)` comes from its own depth. An output pixel is the
//! weight-normalized sum of everything that lands on it:
//!
//! ```text
//! out(x) = Σ_y w(x,y) · aif(y) / Σ_y w(x,y)
//! w(x,y) = t_y(|x_r − y_r|) · t_y(|x_c − y_c|),  t_y(k) = exp(−k² / 2σ(y)²) / S(σ(y))
//! ```
//!
//! where `S` normalizes the 1-D profile over `|k| ≤ r(y) = min(⌈3σ⌉, max_kernel_radius)`.
//! The frame is extended by edge replication; the replicated copies of a border
//! pixel are folded into that pixel's profile, so the sum only runs over real
//! pixels. With a uniform σ this is exactly a replicate-border convolution.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{DepthMap, Image};
use crate::optics::{coc_depth_gradient, coc_diameter_px, FocusSchedule, LensConfig};

/// Ordered focal slices, one per focus distance.
#[derive(Debug, Clone, PartialEq)]
pub struct FocalStack {
    slices: Vec<Image>,
    schedule: FocusSchedule,
}

impl FocalStack {
    pub fn new(slices: Vec<Image>, schedule: FocusSchedule) -> Result<Self> {
        if slices.len() != schedule.len() {
            return Err(Error::Dimension(format!(
                "{} slices for {} focus distances",
                slices.len(),
                schedule.len()
            )));
        }
        if slices.iter().any(|s| !s.same_shape(&slices[0])) {
            return Err(Error::Dimension("focal slices differ in shape".into()));
        }
        Ok(Self { slices, schedule })
    }

    pub fn slices(&self) -> &[Image] {
        &self.slices
    }

    pub fn schedule(&self) -> &FocusSchedule {
        &self.schedule
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn height(&self) -> usize {
        self.slices[0].height()
    }

    pub fn width(&self) -> usize {
        self.slices[0].width()
    }

    pub fn channels(&self) -> usize {
        self.slices[0].channels()
    }
}

/// `∂L/∂depth` per pixel, in loss units per meter.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthGradientMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DepthGradientMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }
}

/// Gaussian PSF width in pixels: `max(sigma_floor, coc_to_sigma · CoC)`.
pub fn sigma_at(depth: f64, focus_dist: f64, lens: &LensConfig) -> Result<f64> {
    Ok(lens
        .sigma_floor
        .max(lens.coc_to_sigma * coc_diameter_px(depth, focus_dist, lens)?))
}

/// Truncation radius `min(⌈3σ⌉, max_kernel_radius)`.
pub fn kernel_radius(sigma: f64, lens: &LensConfig) -> usize {
    ((3.0 * sigma).ceil() as usize).min(lens.max_kernel_radius)
}

/// Per-pixel PSF parameters of one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurField {
    height: usize,
    width: usize,
    sigma: Vec<f64>,
    radius: Vec<usize>,
    /// `∂σ/∂depth`; zero where the floor is active.
    dsigma: Vec<f64>,
}

impl BlurField {
    pub fn new(depth: &DepthMap, focus_dist: f64, lens: &LensConfig) -> Result<Self> {
        Self::build(depth, focus_dist, lens, None)
    }

    /// Like [`BlurField::new`] but with truncation radii fixed from elsewhere,
    /// so small depth perturbations cannot change the kernel support.
    pub fn with_radii(depth: &DepthMap, focus_dist: f64, lens: &LensConfig, radii: &[usize]) -> Result<Self> {
        if radii.len() != depth.data().len() {
            return Err(Error::Dimension("radius map does not match depth map".into()));
        }
        Self::build(depth, focus_dist, lens, Some(radii))
    }

    fn build(depth: &DepthMap, focus_dist: f64, lens: &LensConfig, radii: Option<&[usize]>) -> Result<Self> {
        let n = depth.data().len();
        let mut sigma = Vec::with_capacity(n);
        let mut dsigma = Vec::with_capacity(n);
        for &d in depth.data() {
            let scaled = lens.coc_to_sigma * coc_diameter_px(d, focus_dist, lens)?;
            if scaled > lens.sigma_floor {
                sigma.push(scaled);
                dsigma.push(lens.coc_to_sigma * coc_depth_gradient(d, focus_dist, lens)?);
            } else {
                sigma.push(lens.sigma_floor);
                dsigma.push(0.0);
            }
        }
        let radius = match radii {
            Some(r) => r.to_vec(),
            None => sigma.iter().map(|&s| kernel_radius(s, lens)).collect(),
        };
        Ok(Self {
            height: depth.height(),
            width: depth.width(),
            sigma,
            radius,
            dsigma,
        })
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn radii(&self) -> &[usize] {
        &self.radius
    }
}

/// Normalized 1-D Gaussian profile on `0..=r` with its σ-derivative, both
/// carried with suffix sums for folding replicated border copies.
struct Profile1d {
    r: usize,
    value: Vec<f64>,
    deriv: Vec<f64>,
    tail: Vec<f64>,
    dtail: Vec<f64>,
}

impl Profile1d {
    fn new() -> Self {
        Self {
            r: 0,
            value: Vec::new(),
            deriv: Vec::new(),
            tail: Vec::new(),
            dtail: Vec::new(),
        }
    }

    fn set(&mut self, sigma: f64, r: usize, with_deriv: bool) {
        self.r = r;
        self.value.clear();
        let inv2s2 = 1.0 / (2.0 * sigma * sigma);
        let mut sum = 0.0;
        let mut moment = 0.0;
        for k in 0..=r {
            let k2 = (k * k) as f64;
            let g = (-k2 * inv2s2).exp();
            self.value.push(g);
            let mult = if k == 0 { 1.0 } else { 2.0 };
            sum += mult * g;
            moment += mult * g * k2;
        }
        let mean_k2 = moment / sum;
        for v in &mut self.value {
            *v /= sum;
        }
        fill_tail(&self.value, &mut self.tail);
        if with_deriv {
            let inv_s3 = 1.0 / (sigma * sigma * sigma);
            self.deriv.clear();
            self.deriv.extend(
                self.value
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * ((k * k) as f64 - mean_k2) * inv_s3),
            );
            fill_tail(&self.deriv, &mut self.dtail);
        }
    }

    /// Folded weight at image coordinate `x` for a source at `p` on an axis of length `n`.
    #[inline]
    fn folded(table: &[f64], tail: &[f64], p: usize, x: usize, n: usize) -> f64 {
        if n == 1 {
            tail[0] + tail[1]
        } else if p == 0 {
            tail[x]
        } else if p == n - 1 {
            tail[n - 1 - x]
        } else {
            table[p.abs_diff(x)]
        }
    }

    /// Support `[lo, hi]` on an axis of length `n` and the folded values over it.
    fn axis(&self, p: usize, n: usize, values: &mut Vec<f64>, derivs: Option<&mut Vec<f64>>) -> (usize, usize) {
        let lo = p.saturating_sub(self.r);
        let hi = (p + self.r).min(n - 1);
        values.clear();
        values.extend((lo..=hi).map(|x| Self::folded(&self.value, &self.tail, p, x, n)));
        if let Some(d) = derivs {
            d.clear();
            d.extend((lo..=hi).map(|x| Self::folded(&self.deriv, &self.dtail, p, x, n)));
        }
        (lo, hi)
    }
}

fn fill_tail(table: &[f64], tail: &mut Vec<f64>) {
    tail.clear();
    tail.resize(table.len() + 1, 0.0);
    for k in (0..table.len()).rev() {
        tail[k] = tail[k + 1] + table[k];
    }
}

/// Forward-pass results kept for the adjoint.
#[derive(Debug, Clone)]
pub(crate) struct Forward {
    pub out: Vec<f64>,
    pub den: Vec<f64>,
}

// Source rows per scatter band. Fixed so that the summation order, and hence
// the bits of the result, never depend on the thread count.
const BAND_ROWS: usize = 16;

pub(crate) fn forward(aif: &Image, blur: &BlurField) -> Forward {
    let (h, w, ch) = (aif.height(), aif.width(), aif.channels());
    let max_r = blur.radius.iter().copied().max().unwrap_or(0);
    let bands: Vec<(usize, Vec<f64>, Vec<f64>)> = (0..h.div_ceil(BAND_ROWS))
        .into_par_iter()
        .map(|b| {
            let src_lo = b * BAND_ROWS;
            let src_hi = (src_lo + BAND_ROWS).min(h);
            let row0 = src_lo.saturating_sub(max_r);
            let row1 = (src_hi - 1 + max_r).min(h - 1);
            let rows = row1 - row0 + 1;
            let mut num = vec![0.0; rows * w * ch];
            let mut den = vec![0.0; rows * w];
            let mut prof = Profile1d::new();
            let (mut vr, mut vc) = (Vec::new(), Vec::new());
            for pr in src_lo..src_hi {
                for pc in 0..w {
                    let p = pr * w + pc;
                    prof.set(blur.sigma[p], blur.radius[p], false);
                    let (rlo, _) = prof.axis(pr, h, &mut vr, None);
                    let (clo, chi) = prof.axis(pc, w, &mut vc, None);
                    let src = &aif.data()[p * ch..(p + 1) * ch];
                    for (i, &wv) in vr.iter().enumerate() {
                        let lr = rlo + i - row0;
                        let den_row = &mut den[lr * w + clo..=lr * w + chi];
                        let num_row = &mut num[(lr * w + clo) * ch..(lr * w + chi + 1) * ch];
                        match ch {
                            1 => {
                                let a = src[0] * wv;
                                for ((n, d), &wh) in num_row.iter_mut().zip(den_row.iter_mut()).zip(&vc) {
                                    *d += wv * wh;
                                    *n += a * wh;
                                }
                            }
                            _ => {
                                for (d, &wh) in den_row.iter_mut().zip(&vc) {
                                    *d += wv * wh;
                                }
                                for (px, &wh) in num_row.chunks_exact_mut(ch).zip(&vc) {
                                    let wgt = wv * wh;
                                    for (n, &a) in px.iter_mut().zip(src) {
                                        *n += wgt * a;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            (row0, num, den)
        })
        .collect();

    let mut num = vec![0.0; h * w * ch];
    let mut den = vec![0.0; h * w];
    for (row0, bnum, bden) in &bands {
        let off = row0 * w;
        for (d, b) in den[off..off + bden.len()].iter_mut().zip(bden) {
            *d += b;
        }
        for (n, b) in num[off * ch..off * ch + bnum.len()].iter_mut().zip(bnum) {
            *n += b;
        }
    }
    for (px, &d) in num.chunks_exact_mut(ch).zip(&den) {
        for v in px {
            *v /= d;
        }
    }
    Forward { out: num, den }
}

/// `∂L/∂depth` for `L` with `∂L/∂out = upstream`, given a completed forward pass.
///
/// For a source `y`, `∂w(x,y)/∂σ(y)` is the product rule over the two folded
/// profiles, and `∂out(x)/∂w(x,y) = (aif(y) − out(x)) / D(x)`.
pub(crate) fn adjoint(aif: &Image, blur: &BlurField, fwd: &Forward, upstream: &[f64]) -> Vec<f64> {
    let (h, w, ch) = (aif.height(), aif.width(), aif.channels());
    let n = h * w;
    // Channel planes g[c][x] = u_c(x) / D(x);  k[x] = Σ_c u_c(x) out_c(x) / D(x)
    let mut g = vec![0.0; n * ch];
    let mut k = vec![0.0; n];
    for x in 0..n {
        let inv = 1.0 / fwd.den[x];
        let mut acc = 0.0;
        for c in 0..ch {
            let u = upstream[x * ch + c];
            g[c * n + x] = u * inv;
            acc += u * fwd.out[x * ch + c];
        }
        k[x] = acc * inv;
    }

    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|pr| {
            let mut prof = Profile1d::new();
            let (mut vr, mut dvr, mut vc, mut dvc) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            let mut grad_row = vec![0.0; w];
            for pc in 0..w {
                let p = pr * w + pc;
                if blur.dsigma[p] == 0.0 {
                    continue;
                }
                prof.set(blur.sigma[p], blur.radius[p], true);
                let (rlo, _) = prof.axis(pr, h, &mut vr, Some(&mut dvr));
                let (clo, chi) = prof.axis(pc, w, &mut vc, Some(&mut dvc));
                let src = &aif.data()[p * ch..(p + 1) * ch];
                let mut dl_dsigma = 0.0;
                for i in 0..vr.len() {
                    let span = (rlo + i) * w + clo..=(rlo + i) * w + chi;
                    // Σ_xc h(xc)·B(x) and Σ_xc h'(xc)·B(x), B = Σ_c a_c g_c − k
                    let (kv, kd) = dot2(&vc, &dvc, &k[span.clone()]);
                    let (mut s_val, mut s_der) = (-kv, -kd);
                    for (c, &a) in src.iter().enumerate() {
                        let plane = &g[c * n..(c + 1) * n];
                        let (gv, gd) = dot2(&vc, &dvc, &plane[span.clone()]);
                        s_val += a * gv;
                        s_der += a * gd;
                    }
                    dl_dsigma += dvr[i] * s_val + vr[i] * s_der;
                }
                grad_row[pc] = dl_dsigma * blur.dsigma[p];
            }
            grad_row
        })
        .collect();
    rows.concat()
}

/// `(Σ a·x, Σ b·x)` with four independent accumulators per sum.
#[inline]
fn dot2(a: &[f64], b: &[f64], x: &[f64]) -> (f64, f64) {
    let mut sa = [0.0; 4];
    let mut sb = [0.0; 4];
    let (ac, bc, xc) = (a.chunks_exact(4), b.chunks_exact(4), x.chunks_exact(4));
    let (ar, br, xr) = (ac.remainder(), bc.remainder(), xc.remainder());
    for ((a4, b4), x4) in ac.zip(bc).zip(xc) {
        for l in 0..4 {
            sa[l] += a4[l] * x4[l];
            sb[l] += b4[l] * x4[l];
        }
    }
    let mut ta = (sa[0] + sa[1]) + (sa[2] + sa[3]);
    let mut tb = (sb[0] + sb[1]) + (sb[2] + sb[3]);
    for ((a, b), x) in ar.iter().zip(br).zip(xr) {
        ta += a * x;
        tb += b * x;
    }
    (ta, tb)
}

fn check_inputs(aif: &Image, depth: &DepthMap) -> Result<()> {
    if !depth.matches(aif) {
        return Err(Error::Dimension(format!(
            "image is {}x{} but depth map is {}x{}",
            aif.height(),
            aif.width(),
            depth.height(),
            depth.width()
        )));
    }
    Ok(())
}

/// Renders the slice focused at `focus_dist`.
pub fn render_slice(aif: &Image, depth: &DepthMap, focus_dist: f64, lens: &LensConfig) -> Result<Image> {
    check_inputs(aif, depth)?;
    let blur = BlurField::new(depth, focus_dist, lens)?;
    Ok(render_with_blur(aif, &blur))
}

/// Renders with a precomputed [`BlurField`].
pub fn render_with_blur(aif: &Image, blur: &BlurField) -> Image {
    let fwd = forward(aif, blur);
    Image::from_parts_unchecked(aif.height(), aif.width(), aif.channels(), fwd.out)
}

/// One [`render_slice`] per focus distance, in schedule order.
pub fn render_stack(aif: &Image, depth: &DepthMap, schedule: &FocusSchedule, lens: &LensConfig) -> Result<FocalStack> {
    check_inputs(aif, depth)?;
    let slices = schedule
        .distances()
        .par_iter()
        .map(|&f| render_slice(aif, depth, f, lens))
        .collect::<Result<Vec<_>>>()?;
    FocalStack::new(slices, schedule.clone())
}

/// Back-propagates `upstream = ∂L/∂out` through [`render_slice`] to the depth map.
pub fn render_slice_adjoint(
    aif: &Image,
    depth: &DepthMap,
    focus_dist: f64,
    lens: &LensConfig,
    upstream: &Image,
) -> Result<DepthGradientMap> {
    check_inputs(aif, depth)?;
    let blur = BlurField::new(depth, focus_dist, lens)?;
    adjoint_with_blur(aif, &blur, upstream)
}

/// Adjoint with a precomputed [`BlurField`] (e.g. one with frozen radii).
pub fn adjoint_with_blur(aif: &Image, blur: &BlurField, upstream: &Image) -> Result<DepthGradientMap> {
    if !upstream.same_shape(aif) {
        return Err(Error::Dimension(
            "upstream gradient does not match the rendered slice".into(),
        ));
    }
    if blur.height != aif.height() || blur.width != aif.width() {
        return Err(Error::Dimension("blur field does not match the image".into()));
    }
    let fwd = forward(aif, blur);
    Ok(DepthGradientMap {
        height: aif.height(),
        width: aif.width(),
        data: adjoint(aif, blur, &fwd, upstream.data()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{convolve2d, Kernel};
    use crate::optics::default_schedule;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn texture(h: usize, w: usize, ch: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let white = Image::from_fn(h, w, ch, |_, _, _| rng.random::<f64>()).unwrap();
        convolve2d(&white, &Kernel::gaussian(0.8).unwrap()).unwrap()
    }

    fn random_depth(h: usize, w: usize, seed: u64) -> DepthMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DepthMap::from_fn(h, w, |_, _| rng.random_range(0.8..5.0)).unwrap()
    }

    fn lap_energy(img: &Image) -> f64 {
        let l = convolve2d(&img.luma(), &Kernel::laplacian()).unwrap();
        l.data().iter().map(|v| v.abs()).sum::<f64>() / l.data().len() as f64
    }

    #[test]
    fn sigma_floor_and_scaling() {
        let lens = LensConfig::default();
        assert_eq!(sigma_at(1.3, 1.3, &lens).unwrap(), 0.25);
        let s = sigma_at(2.0, 1.0, &lens).unwrap();
        assert!((s - 0.5 * 16.0256).abs() < 1e-3, "{s}");
        assert!((s - 8.01).abs() < 0.01);
    }

    #[test]
    fn sigma_is_continuous_at_floor() {
        let lens = LensConfig::default();
        let df = 1.2;
        // Diopter offset at which k·c hits the floor.
        let off = lens.sigma_floor / lens.coc_to_sigma / lens.coc_scale(df);
        let d0 = 1.0 / (1.0 / df + off);
        let below = sigma_at(d0 * (1.0 + 1e-9), df, &lens).unwrap();
        let above = sigma_at(d0 * (1.0 - 1e-9), df, &lens).unwrap();
        assert!((below - above).abs() < 1e-6);
    }

    #[test]
    fn in_focus_render_matches_uniform_convolution() {
        let lens = LensConfig::default();
        let aif = texture(24, 20, 3, 1);
        let depth = DepthMap::filled(24, 20, 1.6).unwrap();
        let out = render_slice(&aif, &depth, 1.6, &lens).unwrap();
        let k = Kernel::gaussian_with_radius(0.25, 1).unwrap();
        let oracle = convolve2d(&aif, &k).unwrap();
        let dev = out
            .data()
            .iter()
            .zip(oracle.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev <= 1e-12, "{dev}");
        let from_aif = out
            .data()
            .iter()
            .zip(aif.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(from_aif <= 0.02, "{from_aif}");
    }

    #[test]
    fn defocused_plane_matches_uniform_convolution() {
        let lens = LensConfig::default();
        let aif = texture(48, 48, 1, 2);
        let depth = DepthMap::filled(48, 48, 2.0).unwrap();
        let out = render_slice(&aif, &depth, 1.0, &lens).unwrap();
        let sigma = sigma_at(2.0, 1.0, &lens).unwrap();
        let k = Kernel::gaussian_with_radius(sigma, kernel_radius(sigma, &lens)).unwrap();
        let oracle = convolve2d(&aif, &k).unwrap();
        let dev = out
            .data()
            .iter()
            .zip(oracle.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev <= 1e-12, "{dev}");
    }

    #[test]
    fn constant_image_is_preserved() {
        let lens = LensConfig::default();
        let aif = Image::filled(20, 17, 3, 0.42).unwrap();
        let depth = random_depth(20, 17, 3);
        for f in default_schedule().distances() {
            let out = render_slice(&aif, &depth, *f, &lens).unwrap();
            assert!(out.data().iter().all(|v| (v - 0.42).abs() <= 1e-12));
        }
    }

    #[test]
    fn render_stack_matches_slices() {
        let lens = LensConfig::default();
        let aif = texture(16, 16, 1, 4);
        let depth = random_depth(16, 16, 5);
        let stack = render_stack(&aif, &depth, &default_schedule(), &lens).unwrap();
        assert_eq!(stack.len(), 6);
        let one = render_stack(&aif, &depth, &FocusSchedule::new(vec![2.4]).unwrap(), &lens).unwrap();
        assert_eq!(one.slices()[0], render_slice(&aif, &depth, 2.4, &lens).unwrap());
        assert_eq!(one.slices()[0], stack.slices()[4]);
    }

    #[test]
    fn in_focus_slice_is_sharpest() {
        let lens = LensConfig::default();
        let aif = texture(64, 64, 1, 6);
        let depth = DepthMap::filled(64, 64, 1.2).unwrap();
        let stack = render_stack(&aif, &depth, &default_schedule(), &lens).unwrap();
        let energies: Vec<f64> = stack.slices().iter().map(lap_energy).collect();
        let best = energies.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(best, 2, "{energies:?}");
    }

    #[test]
    fn blur_grows_with_defocus() {
        let lens = LensConfig::default();
        let aif = texture(64, 64, 1, 7);
        let df = 1.6;
        let energies: Vec<f64> = [0.0, 0.1, 0.2, 0.4]
            .iter()
            .map(|off| {
                let d = 1.0 / (1.0 / df + off);
                let depth = DepthMap::filled(64, 64, d).unwrap();
                lap_energy(&render_slice(&aif, &depth, df, &lens).unwrap())
            })
            .collect();
        assert!(energies.windows(2).all(|w| w[1] < w[0]), "{energies:?}");
    }

    #[test]
    fn adjoint_vanishes_for_constant_image_and_in_focus_depth() {
        let lens = LensConfig::default();
        let depth = random_depth(12, 12, 8);
        let up = texture(12, 12, 1, 9);
        let flat = Image::filled(12, 12, 1, 0.3).unwrap();
        let g = render_slice_adjoint(&flat, &depth, 1.2, &lens, &up).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-12));
        let aif = texture(12, 12, 1, 10);
        let focused = DepthMap::filled(12, 12, 1.2).unwrap();
        let g = render_slice_adjoint(&aif, &focused, 1.2, &lens, &up).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjoint_matches_central_differences() {
        let lens = LensConfig::default();
        let (h, w) = (10, 9);
        for ch in [1, 3] {
            let aif = texture(h, w, ch, 20 + ch as u64);
            let depth = random_depth(h, w, 30);
            let up = texture(h, w, ch, 40);
            let base = BlurField::new(&depth, 1.2, &lens).unwrap();
            let grad = adjoint_with_blur(&aif, &base, &up).unwrap();
            let loss = |d: &DepthMap| {
                let b = BlurField::with_radii(d, 1.2, &lens, base.radii()).unwrap();
                let out = render_with_blur(&aif, &b);
                out.data().iter().zip(up.data()).map(|(o, u)| o * u).sum::<f64>()
            };
            let step = 1e-5;
            for p in 0..h * w {
                let mut plus = depth.data().to_vec();
                let mut minus = depth.data().to_vec();
                plus[p] += step;
                minus[p] -= step;
                let fd = (loss(&DepthMap::new(h, w, plus).unwrap()) - loss(&DepthMap::new(h, w, minus).unwrap()))
                    / (2.0 * step);
                let an = grad.data()[p];
                let scale = an.abs().max(fd.abs());
                if scale > 0.0 {
                    assert!(
                        (an - fd).abs() / scale <= 1e-4,
                        "ch={ch} p={p}: analytic {an} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch_errors() {
        let lens = LensConfig::default();
        let aif = Image::filled(4, 5, 1, 0.5).unwrap();
        let depth = DepthMap::filled(5, 4, 1.0).unwrap();
        assert!(matches!(
            render_slice(&aif, &depth, 1.0, &lens),
            Err(Error::Dimension(_))
        ));
        let depth = DepthMap::filled(4, 5, 1.0).unwrap();
        let up = Image::filled(4, 5, 3, 0.0).unwrap();
        assert!(matches!(
            render_slice_adjoint(&aif, &depth, 1.0, &lens, &up),
            Err(Error::Dimension(_))
        ));
    }
}
