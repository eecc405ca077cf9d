//! Thin-lens defocus: circle of confusion, its depth derivative, depth-of-field
//! limits, and the focus schedule with a tiling audit.
//!
//! Everything is written in diopter-linear form. At fixed focus distance `d_f`
//! the blur diameter is `c = K(d_f) · |1/d − 1/d_f|` with
//! `K(d_f) = A·f·d_f / ((d_f − f) · pitch)` pixels per diopter.

use crate::error::{Error, Result};
use crate::image::DepthRange;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LensConfig {
    /// Meters.
    pub focal_length: f64,
    pub f_number: f64,
    /// Meters per pixel.
    pub pixel_pitch: f64,
    /// Gaussian σ per pixel of CoC diameter.
    pub coc_to_sigma: f64,
    /// Lower bound on σ in pixels.
    pub sigma_floor: f64,
    pub max_kernel_radius: usize,
}

impl Default for LensConfig {
    fn default() -> Self {
        Self {
            focal_length: 0.025,
            f_number: 2.0,
            pixel_pitch: 10e-6,
            coc_to_sigma: 0.5,
            sigma_floor: 0.25,
            max_kernel_radius: 24,
        }
    }
}

impl LensConfig {
    pub fn aperture(&self) -> f64 {
        self.focal_length / self.f_number
    }

    pub fn validate(&self, range: &DepthRange) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidValue(format!("{name} must be positive, got {v}")))
            }
        };
        positive("focal_length", self.focal_length)?;
        positive("f_number", self.f_number)?;
        positive("pixel_pitch", self.pixel_pitch)?;
        positive("sigma_floor", self.sigma_floor)?;
        if !(self.coc_to_sigma > 0.0 && self.coc_to_sigma <= 1.0) {
            return Err(Error::InvalidValue(format!(
                "coc_to_sigma must be in (0, 1], got {}",
                self.coc_to_sigma
            )));
        }
        if self.focal_length >= range.min {
            return Err(Error::InvalidValue(format!(
                "focal_length {} must be shorter than the nearest depth {}",
                self.focal_length, range.min
            )));
        }
        Ok(())
    }

    /// CoC diameter in pixels per diopter of defocus when focused at `focus_dist`.
    pub fn coc_scale(&self, focus_dist: f64) -> f64 {
        let f = self.focal_length;
        self.aperture() * f * focus_dist / ((focus_dist - f) * self.pixel_pitch)
    }

    fn check_depths(&self, depth: f64, focus_dist: f64) -> Result<()> {
        if !(depth > self.focal_length) || !depth.is_finite() {
            return Err(Error::Domain(format!(
                "depth {depth} m must exceed the focal length {} m",
                self.focal_length
            )));
        }
        if !(focus_dist > self.focal_length) || !focus_dist.is_finite() {
            return Err(Error::Domain(format!(
                "focus distance {focus_dist} m must exceed the focal length {} m",
                self.focal_length
            )));
        }
        Ok(())
    }
}

/// Blur-circle diameter in pixels of a point at `depth` with the lens focused at `focus_dist`.
pub fn coc_diameter_px(depth: f64, focus_dist: f64, lens: &LensConfig) -> Result<f64> {
    lens.check_depths(depth, focus_dist)?;
    Ok(lens.coc_scale(focus_dist) * (1.0 / depth - 1.0 / focus_dist).abs())
}

/// `∂c/∂depth` in pixels per meter; 0 on the in-focus plane.
pub fn coc_depth_gradient(depth: f64, focus_dist: f64, lens: &LensConfig) -> Result<f64> {
    lens.check_depths(depth, focus_dist)?;
    let offset = 1.0 / depth - 1.0 / focus_dist;
    if offset == 0.0 {
        return Ok(0.0);
    }
    Ok(lens.coc_scale(focus_dist) * offset.signum() * (-1.0 / (depth * depth)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DofLimits {
    pub near: f64,
    /// `f64::INFINITY` past the hyperfocal distance.
    pub far: f64,
}

/// Depths on either side of `focus_dist` at which the CoC reaches `coc_threshold` pixels.
pub fn dof_limits(focus_dist: f64, lens: &LensConfig, coc_threshold: f64) -> Result<DofLimits> {
    lens.check_depths(focus_dist, focus_dist)?;
    if !(coc_threshold >= 0.0) {
        return Err(Error::InvalidValue(format!(
            "coc_threshold must be non-negative, got {coc_threshold}"
        )));
    }
    let half_width = dof_half_width(focus_dist, lens, coc_threshold);
    let q = 1.0 / focus_dist;
    let far_q = q - half_width;
    Ok(DofLimits {
        near: 1.0 / (q + half_width),
        far: if far_q <= 0.0 { f64::INFINITY } else { 1.0 / far_q },
    })
}

/// Half-width of the depth of field in diopters.
pub fn dof_half_width(focus_dist: f64, lens: &LensConfig, coc_threshold: f64) -> f64 {
    coc_threshold / lens.coc_scale(focus_dist)
}

/// Strictly increasing focus distances in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct FocusSchedule {
    distances: Vec<f64>,
}

impl FocusSchedule {
    pub fn new(distances: Vec<f64>) -> Result<Self> {
        if distances.is_empty() {
            return Err(Error::InvalidValue("focus schedule must not be empty".into()));
        }
        if distances.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::InvalidValue(
                "focus distances must be finite and positive".into(),
            ));
        }
        if distances.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidValue(format!(
                "focus distances must be strictly increasing, got {distances:?}"
            )));
        }
        Ok(Self { distances })
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }

    pub fn check_range(&self, range: &DepthRange) -> Result<()> {
        match self.distances.iter().find(|d| !range.contains(**d)) {
            Some(d) => Err(Error::InvalidValue(format!(
                "focus distance {d} outside depth range [{}, {}]",
                range.min, range.max
            ))),
            None => Ok(()),
        }
    }

    /// Diopter spacing `1/d_i − 1/d_{i+1}` between neighbouring slices.
    pub fn diopter_gaps(&self) -> Vec<f64> {
        self.distances.windows(2).map(|w| 1.0 / w[0] - 1.0 / w[1]).collect()
    }
}

/// 0.8, 1, 1.2, 1.6, 2.4 and 5 m.
pub fn default_schedule() -> FocusSchedule {
    FocusSchedule {
        distances: vec![0.8, 1.0, 1.2, 1.6, 2.4, 5.0],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TilingReport {
    /// Per adjacent pair, `(w_i + w_{i+1}) − gap_i` in diopters:
    /// positive means the two depths of field overlap, negative leaves a gap.
    pub pair_residuals: Vec<f64>,
    pub limits: Vec<DofLimits>,
    /// Near limit of the first slice reaches `range.min`.
    pub covers_near: bool,
    /// Far limit of the last slice reaches `range.max`.
    pub covers_far: bool,
}

impl TilingReport {
    pub fn max_abs_residual(&self) -> f64 {
        self.pair_residuals.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("pair_index,gap_diopters\n");
        for (i, r) in self.pair_residuals.iter().enumerate() {
            s.push_str(&format!("{i},{r}\n"));
        }
        s
    }
}

pub fn check_schedule_tiling(
    schedule: &FocusSchedule,
    lens: &LensConfig,
    coc_threshold: f64,
    range: &DepthRange,
) -> Result<TilingReport> {
    if schedule.len() < 2 {
        return Err(Error::InvalidValue("tiling needs at least two focus distances".into()));
    }
    let limits = schedule
        .distances()
        .iter()
        .map(|&d| dof_limits(d, lens, coc_threshold))
        .collect::<Result<Vec<_>>>()?;
    let widths: Vec<f64> = schedule
        .distances()
        .iter()
        .map(|&d| dof_half_width(d, lens, coc_threshold))
        .collect();
    let pair_residuals = schedule
        .diopter_gaps()
        .iter()
        .enumerate()
        .map(|(i, gap)| widths[i] + widths[i + 1] - gap)
        .collect();
    Ok(TilingReport {
        pair_residuals,
        covers_near: limits[0].near <= range.min,
        covers_far: limits[limits.len() - 1].far >= range.max,
        limits,
    })
}

/// CoC threshold (pixels) at which the mean DoF half-width equals half the mean
/// diopter gap of `schedule`.
pub fn calibrate_coc_threshold(schedule: &FocusSchedule, lens: &LensConfig) -> Result<f64> {
    let gaps = schedule.diopter_gaps();
    if gaps.is_empty() {
        return Err(Error::InvalidValue(
            "calibration needs at least two focus distances".into(),
        ));
    }
    let target = gaps.iter().sum::<f64>() / gaps.len() as f64 / 2.0;
    let mean_inv_scale = schedule
        .distances()
        .iter()
        .map(|&d| 1.0 / lens.coc_scale(d))
        .sum::<f64>()
        / schedule.len() as f64;
    Ok(target / mean_inv_scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lens() -> LensConfig {
        LensConfig::default()
    }

    #[test]
    fn in_focus_plane_has_zero_coc() {
        assert_eq!(coc_diameter_px(1.7, 1.7, &lens()).unwrap(), 0.0);
        assert_eq!(coc_depth_gradient(1.7, 1.7, &lens()).unwrap(), 0.0);
    }

    #[test]
    fn coc_hand_evaluated() {
        // (0.0125 · 0.025 · 1.0 / 0.975) · |0.5 − 1.0| / 1e-5
        let hand = 0.0125 * 0.025 * 1.0 / 0.975 * 0.5 / 1e-5;
        let c = coc_diameter_px(2.0, 1.0, &lens()).unwrap();
        assert!((c - hand).abs() < 1e-9);
        assert!((c - 16.03).abs() < 0.005);
        let far = coc_diameter_px(1e12, 1.0, &lens()).unwrap();
        assert!((far - 32.05).abs() < 0.01);
    }

    #[test]
    fn coc_gradient_hand_evaluated() {
        let g = coc_depth_gradient(2.0, 1.0, &lens()).unwrap();
        let hand = 0.0125 * 0.025 / 0.975 * 0.25 / 1e-5;
        assert!((g - hand).abs() < 1e-9);
        assert!((g - 8.01).abs() < 0.005);
    }

    #[test]
    fn coc_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l = lens();
        let h = 1e-6;
        let mut checked = 0;
        while checked < 100 {
            let d: f64 = rng.random_range(0.7..10.0);
            let df: f64 = rng.random_range(0.7..10.0);
            if (1.0 / d - 1.0 / df).abs() < 1e-3 {
                continue;
            }
            let fd = (coc_diameter_px(d + h, df, &l).unwrap() - coc_diameter_px(d - h, df, &l).unwrap()) / (2.0 * h);
            let an = coc_depth_gradient(d, df, &l).unwrap();
            assert!((fd - an).abs() / an.abs() <= 1e-6, "d={d} df={df} fd={fd} an={an}");
            checked += 1;
        }
    }

    #[test]
    fn coc_is_linear_in_diopter_offset() {
        let l = lens();
        let df = 1.6;
        for off in [0.01, 0.1, 0.3] {
            let c1 = coc_diameter_px(1.0 / (1.0 / df + off), df, &l).unwrap();
            let c2 = coc_diameter_px(1.0 / (1.0 / df + 2.0 * off), df, &l).unwrap();
            assert!((c2 - 2.0 * c1).abs() <= 1e-12 * c2.max(1.0));
        }
    }

    #[test]
    fn depth_at_focal_length_is_domain_error() {
        assert!(matches!(coc_diameter_px(0.025, 1.0, &lens()), Err(Error::Domain(_))));
        assert!(matches!(coc_depth_gradient(0.01, 1.0, &lens()), Err(Error::Domain(_))));
    }

    #[test]
    fn dof_limits_hand_evaluated() {
        let l = lens();
        let lim = dof_limits(1.0, &l, 1.0).unwrap();
        let w: f64 = 1e-5 / (0.0125 * 0.025 / 0.975);
        assert!((w - 0.0312).abs() < 1e-4);
        assert!((lim.near - 1.0 / (1.0 + w)).abs() < 1e-12);
        assert!((lim.far - 1.0 / (1.0 - w)).abs() < 1e-12);
        assert!((lim.near - 0.9697).abs() < 1e-4);
        assert!((lim.far - 1.0322).abs() < 1e-4);
        // Thresholds reproduce at the limits.
        assert!((coc_diameter_px(lim.near, 1.0, &l).unwrap() - 1.0).abs() < 1e-9);
        assert!((coc_diameter_px(lim.far, 1.0, &l).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_threshold_collapses_dof() {
        let lim = dof_limits(2.4, &lens(), 0.0).unwrap();
        assert_eq!((lim.near, lim.far), (2.4, 2.4));
    }

    #[test]
    fn hyperfocal_far_limit_is_infinite() {
        let l = lens();
        // Threshold giving a 0.2 diopter half-width at 5 m.
        let t = 0.2 * l.coc_scale(5.0);
        assert_eq!(dof_limits(5.0, &l, t).unwrap().far, f64::INFINITY);
        assert!(dof_limits(5.0, &l, 0.9 * t).unwrap().far.is_finite());
    }

    #[test]
    fn default_schedule_values_and_gaps() {
        let s = default_schedule();
        assert_eq!(s.distances(), &[0.8, 1.0, 1.2, 1.6, 2.4, 5.0]);
        assert!(FocusSchedule::new(s.distances().to_vec()).is_ok());
        let expected = [0.25, 1.0 / 6.0, 0.2083, 0.2083, 0.2167];
        for (g, e) in s.diopter_gaps().iter().zip(expected) {
            assert!((g - e).abs() < 1e-4, "{g} vs {e}");
        }
    }

    #[test]
    fn schedule_rejects_non_increasing() {
        assert!(FocusSchedule::new(vec![1.0, 1.0]).is_err());
        assert!(FocusSchedule::new(vec![]).is_err());
        assert!(default_schedule().check_range(&DepthRange::default()).is_ok());
    }

    #[test]
    fn tiling_with_zero_threshold_reports_full_gaps() {
        let s = default_schedule();
        let rep = check_schedule_tiling(&s, &lens(), 0.0, &DepthRange::default()).unwrap();
        for (r, g) in rep.pair_residuals.iter().zip(s.diopter_gaps()) {
            assert_eq!(*r, -g);
        }
        assert!(!rep.covers_near && !rep.covers_far);
    }

    #[test]
    fn calibrated_tiling_residuals_are_small() {
        let s = default_schedule();
        let l = lens();
        let t = calibrate_coc_threshold(&s, &l).unwrap();
        let widths: Vec<f64> = s.distances().iter().map(|&d| dof_half_width(d, &l, t)).collect();
        let mean_w = widths.iter().sum::<f64>() / 6.0;
        assert!((mean_w - 0.105).abs() < 1e-3);
        let rep = check_schedule_tiling(&s, &l, t, &DepthRange::default()).unwrap();
        assert!(rep.max_abs_residual() <= 0.045, "{:?}", rep.pair_residuals);
        assert!(rep.to_csv().starts_with("pair_index,gap_diopters\n0,"));
    }

    #[test]
    fn lens_validation() {
        let r = DepthRange::default();
        assert!(lens().validate(&r).is_ok());
        assert!(LensConfig {
            f_number: -1.0,
            ..lens()
        }
        .validate(&r)
        .is_err());
        assert!(LensConfig {
            focal_length: 0.8,
            ..lens()
        }
        .validate(&r)
        .is_err());
        assert!(LensConfig {
            coc_to_sigma: 1.5,
            ..lens()
        }
        .validate(&r)
        .is_err());
    }
}
