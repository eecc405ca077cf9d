//! Finite-difference verification of the renderer adjoint and of the full
//! inverse-depth gradient, on small seeded scenes.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::estimate::{smoothness_penalty, InverseDepthField, LossConfig, LossKind, Objective};
use crate::image::{convolve2d, DepthMap, DepthRange, Image, Kernel};
use crate::optics::{FocusSchedule, LensConfig};
use crate::render::{adjoint_with_blur, render_stack, render_with_blur, BlurField};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Scenes in the renderer suite.
    pub scenes: usize,
    /// Scene side length in pixels.
    pub size: usize,
    /// Pixels sampled per scene.
    pub samples: usize,
    /// Central-difference step (meters for the renderer, diopters end to end).
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Depths are drawn uniformly from this interval.
    pub depth_lo: f64,
    pub depth_hi: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            scenes: 5,
            size: 16,
            samples: 100,
            step: 1e-5,
            tolerance: 1e-4,
            depth_lo: 0.8,
            depth_hi: 5.0,
        }
    }
}

impl GradcheckConfig {
    fn validate(&self) -> Result<()> {
        if self.size < 2 || self.scenes == 0 || self.samples == 0 {
            return Err(Error::InvalidValue(
                "gradcheck needs size >= 2 and at least one scene and sample".into(),
            ));
        }
        if !(self.step > 0.0 && self.tolerance > 0.0) {
            return Err(Error::InvalidValue(
                "gradcheck step and tolerance must be positive".into(),
            ));
        }
        if !(0.0 < self.depth_lo && self.depth_lo < self.depth_hi) {
            return Err(Error::InvalidValue(format!(
                "gradcheck depth interval [{}, {}] is empty",
                self.depth_lo, self.depth_hi
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub samples: usize,
    pub max_rel_error: f64,
    pub failures: usize,
    /// Candidates dropped because the difference interval crossed a kink of the loss.
    pub skipped: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

pub fn results_csv(results: &[CheckResult]) -> String {
    let mut s = String::from("check,samples,skipped,max_rel_error,failures,passed\n");
    for r in results {
        s.push_str(&format!(
            "{},{},{},{:e},{},{}\n",
            r.name,
            r.samples,
            r.skipped,
            r.max_rel_error,
            r.failures,
            r.passed()
        ));
    }
    s
}

// Denominator floor as a fraction of the largest analytic gradient in the
// scene. Far below it, differences at the prescribed step resolve nothing but
// round-off.
const RELATIVE_FLOOR: f64 = 1e-6;

fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn floor_of(grad: &[f64]) -> f64 {
    RELATIVE_FLOOR * grad.iter().fold(0.0f64, |m, g| m.max(g.abs()))
}

/// Fourth-order central difference from `d1 = f(x+h) − f(x−h)` and
/// `d2 = f(x+2h) − f(x−2h)`.
fn central_difference(d1: f64, d2: f64, h: f64) -> f64 {
    (8.0 * d1 - d2) / (12.0 * h)
}

/// True when σ switches between the floor and the defocus branch inside
/// `depth ± reach` for one of the focus distances. The floor band is far wider
/// than any stencil, so comparing the endpoints is enough.
fn crosses_floor(depth: f64, reach: f64, focus: &[f64], lens: &LensConfig) -> bool {
    let branch = |d: f64, f: f64| lens.coc_to_sigma * lens.coc_scale(f) * (1.0 / d - 1.0 / f).abs() > lens.sigma_floor;
    focus
        .iter()
        .any(|&f| branch(depth - reach, f) != branch(depth + reach, f))
}

fn texture(rng: &mut ChaCha8Rng, size: usize, channels: usize) -> Result<Image> {
    let white = Image::from_fn(size, size, channels, |_, _, _| rng.random::<f64>())?;
    convolve2d(&white, &Kernel::gaussian(0.8)?)
}

fn random_depth(rng: &mut ChaCha8Rng, size: usize, cfg: &GradcheckConfig) -> Result<DepthMap> {
    DepthMap::from_fn(size, size, |_, _| rng.random_range(cfg.depth_lo..cfg.depth_hi))
}

fn tally(name: String, errors: &[f64], skipped: usize, tolerance: f64) -> CheckResult {
    CheckResult {
        name,
        samples: errors.len(),
        skipped,
        max_rel_error: errors.iter().copied().fold(0.0, f64::max),
        failures: errors.iter().filter(|&&e| !(e <= tolerance)).count(),
    }
}

/// Renderer adjoint against central differences of `L = Σ u·render(depth)`
/// for a random upstream `u`, one result per scene. Truncation radii are frozen,
/// and pixels whose stencil straddles the σ floor are skipped and replaced.
///
/// Scenes alternate between one and three channels and cycle through the
/// schedule's focus distances.
pub fn check_renderer(lens: &LensConfig, schedule: &FocusSchedule, cfg: &GradcheckConfig) -> Result<Vec<CheckResult>> {
    cfg.validate()?;
    let n = cfg.size;
    let mut results = Vec::with_capacity(cfg.scenes);
    for s in 0..cfg.scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(s as u64));
        let channels = if s % 2 == 0 { 1 } else { 3 };
        let focus = schedule.distances()[s % schedule.len()];
        let aif = texture(&mut rng, n, channels)?;
        let upstream = texture(&mut rng, n, channels)?;
        let depth = random_depth(&mut rng, n, cfg)?;
        let base = BlurField::new(&depth, focus, lens)?;
        let grad = adjoint_with_blur(&aif, &base, &upstream)?;
        let render = |d: Vec<f64>| -> Result<Image> {
            let blur = BlurField::with_radii(&DepthMap::new(n, n, d)?, focus, lens, base.radii())?;
            Ok(render_with_blur(&aif, &blur))
        };
        // L(depth + t·e_p) − L(depth − t·e_p), differenced per element before the
        // weighted sum so cancellation stays at the level of single pixel values.
        let delta = |p: usize, t: f64| -> Result<f64> {
            let mut plus = depth.data().to_vec();
            let mut minus = plus.clone();
            plus[p] += t;
            minus[p] -= t;
            let (hi, lo) = (render(plus)?, render(minus)?);
            Ok(hi
                .data()
                .iter()
                .zip(lo.data())
                .zip(upstream.data())
                .map(|((a, b), u)| (a - b) * u)
                .sum())
        };
        let floor = floor_of(grad.data());
        let order = sample(&mut rng, n * n, n * n);
        let mut errors = Vec::with_capacity(cfg.samples);
        let mut skipped = 0;
        for p in order.iter() {
            if errors.len() == cfg.samples {
                break;
            }
            if crosses_floor(depth.data()[p], 2.0 * cfg.step, &[focus], lens) {
                skipped += 1;
                continue;
            }
            let fd = central_difference(delta(p, cfg.step)?, delta(p, 2.0 * cfg.step)?, cfg.step);
            errors.push(rel_error(grad.data()[p], fd, floor));
        }
        results.push(tally(format!("renderer_scene{s}"), &errors, skipped, cfg.tolerance));
    }
    Ok(results)
}

/// Full-chain `∂loss/∂q` against central differences of the loss in diopters,
/// on one scene whose observed stack comes from a different random depth map.
///
/// Pixels whose stencil `q ± 2·step` straddles a kink (the σ floor in any
/// slice or, for L1, a residual changing sign) are skipped and replaced by
/// further random pixels; the difference quotient there does not estimate the
/// derivative.
pub fn check_end_to_end(
    lens: &LensConfig,
    schedule: &FocusSchedule,
    range: &DepthRange,
    loss: &LossConfig,
    cfg: &GradcheckConfig,
) -> Result<CheckResult> {
    cfg.validate()?;
    let n = cfg.size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let aif = texture(&mut rng, n, 1)?;
    let truth = random_depth(&mut rng, n, cfg)?;
    let guess = random_depth(&mut rng, n, cfg)?;
    let observed = render_stack(&aif, &truth, schedule, lens)?;
    let objective = Objective::new(&observed, &aif, lens, loss)?;
    let q = InverseDepthField::from_depth(&guess, *range);
    let radii = objective.radii(&q)?;
    let (_, grad) = objective.loss_and_gradient(&q, Some(&radii))?;
    let residuals = |q: &InverseDepthField| objective.residuals(q, Some(&radii));
    let signs = |r: &[f64]| r.iter().map(|v| v.partial_cmp(&0.0)).collect::<Vec<_>>();
    let base_signs = signs(&residuals(&q)?);
    let per_element = |e: f64| match loss.kind {
        LossKind::L1 => e.abs(),
        LossKind::L2 => e * e,
    };
    let floor = floor_of(&grad);
    let order = sample(&mut rng, n * n, n * n);
    let mut errors = Vec::with_capacity(cfg.samples);
    let mut skipped = 0;
    'pixels: for i in order.iter() {
        if errors.len() == cfg.samples {
            break;
        }
        let depths = [
            1.0 / (q.data()[i] + 2.0 * cfg.step),
            1.0 / (q.data()[i] - 2.0 * cfg.step),
        ];
        if crosses_floor(
            0.5 * (depths[0] + depths[1]),
            0.5 * (depths[1] - depths[0]),
            schedule.distances(),
            lens,
        ) {
            skipped += 1;
            continue;
        }
        let mut deltas = [0.0; 2];
        for (slot, t) in deltas.iter_mut().zip([cfg.step, 2.0 * cfg.step]) {
            let (qp, qm) = (q.with_value(i, q.data()[i] + t), q.with_value(i, q.data()[i] - t));
            let (rp, rm) = (residuals(&qp)?, residuals(&qm)?);
            if loss.kind == LossKind::L1 && (signs(&rp) != base_signs || signs(&rm) != base_signs) {
                skipped += 1;
                continue 'pixels;
            }
            let data: f64 = rp.iter().zip(&rm).map(|(a, b)| per_element(*a) - per_element(*b)).sum();
            let smooth =
                smoothness_penalty(&qp, &aif, loss.smoothness)? - smoothness_penalty(&qm, &aif, loss.smoothness)?;
            *slot = data / rp.len() as f64 + smooth;
        }
        errors.push(rel_error(
            grad[i],
            central_difference(deltas[0], deltas[1], cfg.step),
            floor,
        ));
    }
    Ok(tally("end_to_end".into(), &errors, skipped, cfg.tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::default_schedule;

    #[test]
    fn small_suites_pass() {
        let cfg = GradcheckConfig {
            scenes: 2,
            size: 8,
            samples: 20,
            ..GradcheckConfig::default()
        };
        let lens = LensConfig::default();
        let results = check_renderer(&lens, &default_schedule(), &cfg).unwrap();
        assert_eq!(results.len(), 2);
        assert!(results.iter().all(|r| r.passed() && r.samples == 20), "{results:?}");
        let e2e = check_end_to_end(
            &lens,
            &default_schedule(),
            &DepthRange::default(),
            &LossConfig::default(),
            &cfg,
        )
        .unwrap();
        assert!(e2e.passed(), "{e2e:?}");
        let csv = results_csv(&results);
        assert!(csv.starts_with("check,samples,skipped,max_rel_error,failures,passed\nrenderer_scene0,20,0,"));
    }

    #[test]
    fn stencil_is_exact_for_quartics() {
        let f = |x: f64| 3.0 * x.powi(4) - x.powi(3) + 2.0 * x;
        let (x, h) = (0.7, 1e-2);
        let fd = central_difference(f(x + h) - f(x - h), f(x + 2.0 * h) - f(x - 2.0 * h), h);
        let exact = 12.0 * x.powi(3) - 3.0 * x * x + 2.0;
        assert!((fd - exact).abs() < 1e-10, "{fd} vs {exact}");
    }

    #[test]
    fn rel_error_handles_zero() {
        assert_eq!(rel_error(0.0, 0.0, 0.0), 0.0);
        assert_eq!(rel_error(1.0, 1.0, 0.0), 0.0);
        assert!((rel_error(1.0, 0.9, 0.0) - 0.1).abs() < 1e-12);
        assert!((rel_error(1e-9, 2e-9, 1e-6) - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn bad_config_is_rejected() {
        let cfg = GradcheckConfig {
            step: 0.0,
            ..GradcheckConfig::default()
        };
        assert!(check_renderer(&LensConfig::default(), &default_schedule(), &cfg).is_err());
    }
}
