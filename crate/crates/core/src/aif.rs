//! Laplacian focus measure, all-in-focus compositing and the argmax
//! depth-from-focus baseline.

use crate::error::{Error, Result};
use crate::image::{convolve2d, DepthMap, Image, Kernel};
use crate::optics::FocusSchedule;
use crate::render::FocalStack;

/// Per-slice, per-pixel sharpness, stored slice-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FocusVolume {
    height: usize,
    width: usize,
    n_slices: usize,
    data: Vec<f64>,
}

impl FocusVolume {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_slices(&self) -> usize {
        self.n_slices
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn slice(&self, s: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[s * n..(s + 1) * n]
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, slice: usize) -> f64 {
        self.data[slice * self.height * self.width + row * self.width + col]
    }

    /// One slice as a single-channel image (for dumping).
    pub fn slice_image(&self, s: usize) -> Image {
        Image::from_parts_unchecked(self.height, self.width, 1, self.slice(s).to_vec())
    }

    /// Index of the sharpest slice at a pixel; ties go to the lower index.
    pub fn argmax(&self, row: usize, col: usize) -> usize {
        let mut best = 0;
        let mut best_v = self.get(row, col, 0);
        for s in 1..self.n_slices {
            let v = self.get(row, col, s);
            if v > best_v {
                best = s;
                best_v = v;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AifMode {
    /// Hard per-pixel selection of the sharpest slice.
    Argmax,
    /// Blend with weights `softmax_s(measure / tau)`.
    Softmax { tau: f64 },
}

/// Smoothed absolute 4-neighbour Laplacian of each slice's luma.
///
/// `window_sigma = 0` skips the smoothing. The window radius is `⌈3σ⌉`, capped
/// below the image's shorter side.
pub fn focus_measure(stack: &FocalStack, window_sigma: f64) -> Result<FocusVolume> {
    if stack.is_empty() {
        return Err(Error::InvalidValue("focus measure of an empty stack".into()));
    }
    if !(window_sigma >= 0.0 && window_sigma.is_finite()) {
        return Err(Error::InvalidValue(format!(
            "window sigma must be >= 0, got {window_sigma}"
        )));
    }
    let (h, w) = (stack.height(), stack.width());
    let window = if window_sigma > 0.0 {
        let r = ((3.0 * window_sigma).ceil() as usize).min(h.min(w) - 1);
        Some(Kernel::gaussian_with_radius(window_sigma, r)?)
    } else {
        None
    };
    let lap = Kernel::laplacian();
    let mut data = Vec::with_capacity(h * w * stack.len());
    for slice in stack.slices() {
        let response = convolve2d(&slice.luma(), &lap)?.map(f64::abs)?;
        let measure = match &window {
            Some(k) => convolve2d(&response, k)?,
            None => response,
        };
        // Smoothing non-negative values can still round to a tiny negative.
        data.extend(measure.data().iter().map(|v| v.max(0.0)));
    }
    Ok(FocusVolume {
        height: h,
        width: w,
        n_slices: stack.len(),
        data,
    })
}

fn check_volume(stack: &FocalStack, fv: &FocusVolume) -> Result<()> {
    if fv.n_slices != stack.len() || fv.height != stack.height() || fv.width != stack.width() {
        return Err(Error::Dimension(format!(
            "focus volume {}x{}x{} does not match stack {}x{}x{}",
            fv.height,
            fv.width,
            fv.n_slices,
            stack.height(),
            stack.width(),
            stack.len()
        )));
    }
    Ok(())
}

pub fn composite_aif(stack: &FocalStack, fv: &FocusVolume, mode: AifMode) -> Result<Image> {
    check_volume(stack, fv)?;
    let (h, w, ch) = (stack.height(), stack.width(), stack.channels());
    let mut out = Vec::with_capacity(h * w * ch);
    let mut weights = vec![0.0; stack.len()];
    for r in 0..h {
        for c in 0..w {
            match mode {
                AifMode::Argmax => {
                    let s = fv.argmax(r, c);
                    out.extend((0..ch).map(|k| stack.slices()[s].get(r, c, k)));
                }
                AifMode::Softmax { tau } => {
                    if !(tau > 0.0) {
                        return Err(Error::InvalidValue(format!(
                            "softmax temperature must be positive, got {tau}"
                        )));
                    }
                    let top = fv.get(r, c, fv.argmax(r, c));
                    for (s, wt) in weights.iter_mut().enumerate() {
                        *wt = ((fv.get(r, c, s) - top) / tau).exp();
                    }
                    let total: f64 = weights.iter().sum();
                    for k in 0..ch {
                        let v: f64 = weights
                            .iter()
                            .zip(stack.slices())
                            .map(|(wt, slice)| wt * slice.get(r, c, k))
                            .sum();
                        out.push(v / total);
                    }
                }
            }
        }
    }
    Image::new(h, w, ch, out)
}

/// Focus distance of the sharpest slice at every pixel.
pub fn dff_argmax_depth(fv: &FocusVolume, schedule: &FocusSchedule) -> Result<DepthMap> {
    if fv.n_slices != schedule.len() {
        return Err(Error::Dimension(format!(
            "focus volume has {} slices, schedule has {}",
            fv.n_slices,
            schedule.len()
        )));
    }
    let d = schedule.distances();
    DepthMap::from_fn(fv.height, fv.width, |r, c| d[fv.argmax(r, c)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{default_schedule, LensConfig};
    use crate::render::{render_slice, render_stack};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn texture(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let white = Image::from_fn(h, w, 1, |_, _, _| rng.random::<f64>()).unwrap();
        convolve2d(&white, &Kernel::gaussian(0.7).unwrap()).unwrap()
    }

    fn checker(h: usize, w: usize, period: usize) -> Image {
        Image::from_fn(h, w, 3, |r, c, _| {
            if (r / period + c / period).is_multiple_of(2) {
                0.9
            } else {
                0.1
            }
        })
        .unwrap()
    }

    #[test]
    fn constant_stack_has_zero_measure_and_ties_low() {
        let slices = vec![Image::filled(8, 8, 3, 0.5).unwrap(); 6];
        let stack = FocalStack::new(slices, default_schedule()).unwrap();
        let fv = focus_measure(&stack, 2.0).unwrap();
        assert!(fv.data().iter().all(|&v| v == 0.0));
        let depth = dff_argmax_depth(&fv, stack.schedule()).unwrap();
        assert!(depth.data().iter().all(|&d| d == 0.8));
    }

    #[test]
    fn zero_window_is_raw_laplacian() {
        let img = texture(12, 12, 1);
        let stack = FocalStack::new(vec![img.clone()], FocusSchedule::new(vec![1.0]).unwrap()).unwrap();
        let fv = focus_measure(&stack, 0.0).unwrap();
        let raw = convolve2d(&img, &Kernel::laplacian()).unwrap();
        for (a, b) in fv.data().iter().zip(raw.data()) {
            assert_eq!(*a, b.abs());
        }
    }

    #[test]
    fn sharp_checkerboard_wins_argmax() {
        let lens = LensConfig::default();
        let (h, w) = (64, 64);
        let sharp = checker(h, w, 3);
        let schedule = FocusSchedule::new(vec![1.0, 1.6, 2.4]).unwrap();
        let mut slices = Vec::new();
        for s in 0..3 {
            if s == 1 {
                slices.push(sharp.clone());
            } else {
                let depth = DepthMap::filled(h, w, 4.0 + s as f64).unwrap();
                slices.push(render_slice(&sharp, &depth, 1.0, &lens).unwrap());
            }
        }
        let stack = FocalStack::new(slices, schedule).unwrap();
        let fv = focus_measure(&stack, 2.0).unwrap();
        let margin = 8;
        let mut hits = 0;
        let mut total = 0;
        for r in margin..h - margin {
            for c in margin..w - margin {
                total += 1;
                hits += usize::from(fv.argmax(r, c) == 1);
            }
        }
        assert!(hits as f64 >= 0.99 * total as f64, "{hits}/{total}");
    }

    #[test]
    fn single_slice_composite_is_identity() {
        let img = texture(9, 11, 2);
        let stack = FocalStack::new(vec![img.clone()], FocusSchedule::new(vec![2.0]).unwrap()).unwrap();
        let fv = focus_measure(&stack, 1.0).unwrap();
        assert_eq!(composite_aif(&stack, &fv, AifMode::Argmax).unwrap(), img);
        let soft = composite_aif(&stack, &fv, AifMode::Softmax { tau: 0.5 }).unwrap();
        assert_eq!(soft, img);
    }

    #[test]
    fn argmax_composite_selects_slice_values() {
        let lens = LensConfig::default();
        let aif = texture(32, 32, 3);
        let depth = DepthMap::from_fn(32, 32, |_, c| if c < 16 { 1.0 } else { 2.4 }).unwrap();
        let stack = render_stack(&aif, &depth, &default_schedule(), &lens).unwrap();
        let fv = focus_measure(&stack, 2.0).unwrap();
        let comp = composite_aif(&stack, &fv, AifMode::Argmax).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                let v = comp.get(r, c, 0);
                assert!(stack.slices().iter().any(|s| s.get(r, c, 0) == v));
            }
        }
        let dff = dff_argmax_depth(&fv, stack.schedule()).unwrap();
        assert!(dff.data().iter().all(|d| stack.schedule().distances().contains(d)));
    }

    #[test]
    fn softmax_converges_to_argmax() {
        let lens = LensConfig::default();
        let aif = texture(32, 32, 4);
        let depth = DepthMap::from_fn(32, 32, |r, _| if r < 16 { 1.2 } else { 5.0 }).unwrap();
        let stack = render_stack(&aif, &depth, &default_schedule(), &lens).unwrap();
        let fv = focus_measure(&stack, 2.0).unwrap();
        let hard = composite_aif(&stack, &fv, AifMode::Argmax).unwrap();
        let max_measure = fv.data().iter().copied().fold(0.0, f64::max);
        let tau = 1e-4 * max_measure;
        let soft = composite_aif(&stack, &fv, AifMode::Softmax { tau }).unwrap();
        let mut compared = 0;
        for r in 0..32 {
            for c in 0..32 {
                let s = fv.argmax(r, c);
                let top = fv.get(r, c, s);
                // Skip near-ties where the runner-up is within ~40 temperatures.
                let runner_up = (0..6)
                    .filter(|&k| k != s)
                    .map(|k| fv.get(r, c, k))
                    .fold(f64::MIN, f64::max);
                if top - runner_up < 40.0 * tau {
                    continue;
                }
                compared += 1;
                assert!((soft.get(r, c, 0) - hard.get(r, c, 0)).abs() <= 1e-6);
            }
        }
        assert!(compared > 900);
    }

    #[test]
    fn mismatched_volume_is_rejected() {
        let stack = FocalStack::new(
            vec![Image::filled(4, 4, 1, 0.1).unwrap(); 2],
            FocusSchedule::new(vec![1.0, 2.0]).unwrap(),
        )
        .unwrap();
        let other = FocalStack::new(
            vec![Image::filled(5, 4, 1, 0.1).unwrap(); 2],
            FocusSchedule::new(vec![1.0, 2.0]).unwrap(),
        )
        .unwrap();
        let fv = focus_measure(&other, 0.0).unwrap();
        assert!(matches!(
            composite_aif(&stack, &fv, AifMode::Argmax),
            Err(Error::Dimension(_))
        ));
        assert!(dff_argmax_depth(&fv, &default_schedule()).is_err());
    }
}
