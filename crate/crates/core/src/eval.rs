//! Depth metrics, synthetic RGB-D scenes and the benchmark harness comparing
//! the argmax DFF baseline against estimation with a composited and with the
//! ground-truth all-in-focus image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aif::{composite_aif, dff_argmax_depth, focus_measure, AifMode};
use crate::error::{Error, Result};
use crate::estimate::{estimate_depth, Init, LossConfig};
use crate::image::{convolve2d, DepthMap, DepthRange, Image, Kernel};
use crate::optics::{FocusSchedule, LensConfig};
use crate::render::render_stack;

/// Pixel selection for metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn all(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            keep: vec![true; height * width],
        }
    }

    /// Pixels at least `margin` away from every frame edge.
    pub fn interior(height: usize, width: usize, margin: usize) -> Self {
        let mut keep = vec![false; height * width];
        for r in margin..height.saturating_sub(margin) {
            for c in margin..width.saturating_sub(margin) {
                keep[r * width + c] = true;
            }
        }
        Self { height, width, keep }
    }

    pub fn from_vec(height: usize, width: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != height * width {
            return Err(Error::Dimension("mask size does not match its dimensions".into()));
        }
        Ok(Self { height, width, keep })
    }

    pub fn count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.keep[index]
    }

    fn pairs<'a>(&'a self, pred: &'a DepthMap, gt: &'a DepthMap) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
        if pred.height() != gt.height()
            || pred.width() != gt.width()
            || gt.height() != self.height
            || gt.width() != self.width
        {
            return Err(Error::Dimension(
                "prediction, ground truth and mask must share dimensions".into(),
            ));
        }
        if self.count() == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(self
            .keep
            .iter()
            .zip(pred.data().iter().zip(gt.data()))
            .filter(|(k, _)| **k)
            .map(|(_, (p, g))| (*p, *g)))
    }
}

/// Root-mean-squared depth error over the masked pixels, in meters.
pub fn rmse(pred: &DepthMap, gt: &DepthMap, mask: &Mask) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, g) in mask.pairs(pred, gt)? {
        sum += (p - g) * (p - g);
        n += 1;
    }
    Ok((sum / n as f64).sqrt())
}

/// Fraction of masked pixels with `max(pred/gt, gt/pred) < 1.25^k`.
pub fn delta_accuracy(pred: &DepthMap, gt: &DepthMap, mask: &Mask, k: u32) -> Result<f64> {
    if !(1..=3).contains(&k) {
        return Err(Error::InvalidValue(format!(
            "delta exponent must be 1, 2 or 3, got {k}"
        )));
    }
    let threshold = 1.25f64.powi(k as i32);
    let mut hits = 0usize;
    let mut n = 0usize;
    for (p, g) in mask.pairs(pred, gt)? {
        if !(p > 0.0 && g > 0.0) {
            return Err(Error::Domain(format!("depths must be positive, got {p} and {g}")));
        }
        hits += usize::from((p / g).max(g / p) < threshold);
        n += 1;
    }
    Ok(hits as f64 / n as f64)
}

/// Peak signal-to-noise ratio in dB for unit-range images over masked pixels.
pub fn psnr(a: &Image, b: &Image, mask: &Mask) -> Result<f64> {
    if !a.same_shape(b) || a.height() != mask.height || a.width() != mask.width {
        return Err(Error::Dimension("psnr inputs differ in shape".into()));
    }
    let ch = a.channels();
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..a.height() * a.width() {
        if mask.keep[i] {
            for c in 0..ch {
                let e = a.data()[i * ch + c] - b.data()[i * ch + c];
                sum += e * e;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(10.0 * (1.0 / (sum / n as f64)).log10())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub label: String,
    pub scene: String,
    pub rmse: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub pixels: usize,
}

impl MetricsReport {
    pub fn compute(label: &str, scene: &str, pred: &DepthMap, gt: &DepthMap, mask: &Mask) -> Result<Self> {
        Ok(Self {
            label: label.to_string(),
            scene: scene.to_string(),
            rmse: rmse(pred, gt, mask)?,
            delta1: delta_accuracy(pred, gt, mask, 1)?,
            delta2: delta_accuracy(pred, gt, mask, 2)?,
            delta3: delta_accuracy(pred, gt, mask, 3)?,
            pixels: mask.count(),
        })
    }

    /// Pixel-weighted pooling of per-scene rows into one row.
    pub fn aggregate(label: &str, rows: &[&MetricsReport]) -> Self {
        let n: usize = rows.iter().map(|r| r.pixels).sum();
        let nf = n as f64;
        let pooled = |f: fn(&MetricsReport) -> f64| rows.iter().map(|r| f(r) * r.pixels as f64).sum::<f64>() / nf;
        Self {
            label: label.to_string(),
            scene: "all".to_string(),
            rmse: pooled(|r| r.rmse * r.rmse).sqrt(),
            delta1: pooled(|r| r.delta1),
            delta2: pooled(|r| r.delta2),
            delta3: pooled(|r| r.delta3),
            pixels: n,
        }
    }

    pub fn csv_header() -> &'static str {
        "method,scene,rmse_m,delta1,delta2,delta3,pixels"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.label, self.scene, self.rmse, self.delta1, self.delta2, self.delta3, self.pixels
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SceneKind {
    Plane(f64),
    /// Vertical bands, left to right, each `band_width` columns wide; the last band takes any remainder.
    Staircase {
        depths: Vec<f64>,
        band_width: usize,
    },
    /// `near` left of column `split · width`, `far` to the right.
    TwoPlane {
        near: f64,
        far: f64,
        split: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Texture {
    Checker {
        period: usize,
    },
    /// Smoothed uniform noise, stretched to `[0, 1]`.
    Noise {
        seed: u64,
        correlation_length: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub texture: Texture,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl SceneSpec {
    pub fn new(kind: SceneKind, texture: Texture, height: usize, width: usize) -> Self {
        Self {
            kind,
            texture,
            height,
            width,
            channels: 1,
        }
    }

    pub fn label(&self) -> String {
        let join = |d: &[f64]| d.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("-");
        match &self.kind {
            SceneKind::Plane(d) => format!("plane_{d}"),
            SceneKind::Staircase { depths, .. } => format!("staircase_{}", join(depths)),
            SceneKind::TwoPlane { near, far, .. } => format!("two_plane_{near}-{far}"),
        }
    }

    /// Parses `plane:1.2`, `staircase:0.8,1.2,2.4` or `two_plane:1.0,2.4`.
    pub fn parse_kind(text: &str, width: usize) -> Result<SceneKind> {
        let bad = || Error::InvalidValue(format!("cannot parse scene {text:?}"));
        let (name, args) = text.split_once(':').ok_or_else(bad)?;
        let values: Vec<f64> = args
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        match (name.trim(), values.as_slice()) {
            ("plane", [d]) => Ok(SceneKind::Plane(*d)),
            ("staircase", ds) if !ds.is_empty() => Ok(SceneKind::Staircase {
                depths: ds.to_vec(),
                band_width: width.div_ceil(ds.len()),
            }),
            ("two_plane", [a, b]) => Ok(SceneKind::TwoPlane {
                near: *a,
                far: *b,
                split: 0.5,
            }),
            _ => Err(bad()),
        }
    }

    pub fn validate(&self, range: &DepthRange) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(Error::InvalidValue(format!(
                "scene must be at least 32x32, got {}x{}",
                self.height, self.width
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidValue(format!(
                "scene channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        let depths: Vec<f64> = match &self.kind {
            SceneKind::Plane(d) => vec![*d],
            SceneKind::Staircase { depths, band_width } => {
                if depths.is_empty() || *band_width == 0 {
                    return Err(Error::InvalidValue(
                        "staircase needs depths and a positive band width".into(),
                    ));
                }
                depths.clone()
            }
            SceneKind::TwoPlane { near, far, split } => {
                if !(*split > 0.0 && *split < 1.0) {
                    return Err(Error::InvalidValue(format!(
                        "two-plane split must be in (0, 1), got {split}"
                    )));
                }
                vec![*near, *far]
            }
        };
        if let Some(d) = depths.iter().find(|d| !range.contains(**d)) {
            return Err(Error::InvalidValue(format!(
                "scene depth {d} outside [{}, {}]",
                range.min, range.max
            )));
        }
        match self.texture {
            Texture::Checker { period: 0 } => Err(Error::InvalidValue("checker period must be positive".into())),
            Texture::Noise { correlation_length, .. } if !(correlation_length > 0.0) => {
                Err(Error::InvalidValue("noise correlation length must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Builds the all-in-focus image and ground-truth depth of a synthetic scene.
/// Identical specs give bit-identical outputs.
pub fn make_scene(spec: &SceneSpec, range: &DepthRange) -> Result<(Image, DepthMap)> {
    spec.validate(range)?;
    let (h, w, ch) = (spec.height, spec.width, spec.channels);
    let depth = match &spec.kind {
        SceneKind::Plane(d) => DepthMap::filled(h, w, *d)?,
        SceneKind::Staircase { depths, band_width } => {
            DepthMap::from_fn(h, w, |_, c| depths[(c / band_width).min(depths.len() - 1)])?
        }
        SceneKind::TwoPlane { near, far, split } => {
            let cut = (split * w as f64).round() as usize;
            DepthMap::from_fn(h, w, |_, c| if c < cut { *near } else { *far })?
        }
    };
    let aif = match spec.texture {
        Texture::Checker { period } => Image::from_fn(h, w, ch, |r, c, k| {
            let base: f64 = if (r / period + c / period) % 2 == 0 { 0.85 } else { 0.15 };
            // Slight per-channel tint keeps colour scenes from being gray.
            base - 0.05 * k as f64 * (base - 0.5).signum()
        })?,
        Texture::Noise {
            seed,
            correlation_length,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let white = Image::from_fn(h, w, ch, |_, _, _| rng.random::<f64>())?;
            let r = ((3.0 * correlation_length).ceil() as usize).min(h.min(w) - 1);
            let smooth = convolve2d(&white, &Kernel::gaussian_with_radius(correlation_length, r)?)?;
            let lo = smooth.data().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = smooth.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            smooth.map(|v| (v - lo) / (hi - lo))?
        }
    };
    let lap = convolve2d(&aif.luma(), &Kernel::laplacian())?;
    let energy = lap.data().iter().map(|v| v.abs()).sum::<f64>() / lap.data().len() as f64;
    if energy <= 0.01 {
        return Err(Error::InvalidValue(format!(
            "texture too flat for focus measurement (mean |Laplacian| {energy:.4})"
        )));
    }
    Ok((aif, depth))
}

/// Three noise-textured scenes whose depths avoid the default schedule, so the
/// argmax baseline carries its slice quantization error.
pub fn default_suite(height: usize, width: usize, seed: u64) -> Vec<SceneSpec> {
    let texture = |k: u64| Texture::Noise {
        seed: seed.wrapping_add(k),
        correlation_length: 2.0,
    };
    vec![
        SceneSpec::new(SceneKind::Plane(1.4), texture(0), height, width),
        SceneSpec::new(
            SceneKind::TwoPlane {
                near: 0.9,
                far: 3.2,
                split: 0.5,
            },
            texture(1),
            height,
            width,
        ),
        SceneSpec::new(
            SceneKind::Staircase {
                depths: vec![1.1, 1.9, 3.6],
                band_width: width.div_ceil(3),
            },
            texture(2),
            height,
            width,
        ),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub lens: LensConfig,
    pub schedule: FocusSchedule,
    pub range: DepthRange,
    pub loss: LossConfig,
    /// Initialization for both estimation rows.
    pub init: Init,
    pub window_sigma: f64,
    pub aif_mode: AifMode,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            lens: LensConfig::default(),
            schedule: crate::optics::default_schedule(),
            range: DepthRange::default(),
            loss: LossConfig::default(),
            init: Init::Dff { window_sigma: 2.0 },
            window_sigma: 2.0,
            aif_mode: AifMode::Argmax,
        }
    }
}

pub const METHOD_DFF: &str = "dff_argmax";
pub const METHOD_SYN_AIF: &str = "focal_stack_syn_aif";
pub const METHOD_GT_AIF: &str = "focal_stack_gt_aif";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    /// Three rows per scene, in suite order.
    pub per_scene: Vec<MetricsReport>,
    /// One pooled row per method: baseline, composited AIF, ground-truth AIF.
    pub aggregate: Vec<MetricsReport>,
}

impl BenchmarkReport {
    pub fn row(&self, method: &str) -> Option<&MetricsReport> {
        self.aggregate.iter().find(|r| r.label == method)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", MetricsReport::csv_header());
        for r in self.per_scene.iter().chain(&self.aggregate) {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<24} {:>9} {:>9} {:>9} {:>9}\n",
            "method", "RMSE (m)", "d<1.25", "d<1.25^2", "d<1.25^3"
        );
        for r in &self.aggregate {
            s.push_str(&format!(
                "{:<24} {:>9.4} {:>9.4} {:>9.4} {:>9.4}\n",
                r.label, r.rmse, r.delta1, r.delta2, r.delta3
            ));
        }
        s
    }
}

/// Per scene: render the observed stack from ground truth, then score the DFF
/// baseline and depth estimation with the composited and the true AIF on the
/// interior (margin = `max_kernel_radius`).
pub fn run_benchmark(suite: &[SceneSpec], cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    if suite.is_empty() {
        return Err(Error::InvalidValue("benchmark suite is empty".into()));
    }
    let rows: Vec<[MetricsReport; 3]> = suite
        .par_iter()
        .map(|spec| benchmark_scene(spec, cfg))
        .collect::<Result<_>>()?;
    let per_scene: Vec<MetricsReport> = rows.into_iter().flatten().collect();
    let aggregate = [METHOD_DFF, METHOD_SYN_AIF, METHOD_GT_AIF]
        .iter()
        .map(|m| {
            let of_method: Vec<&MetricsReport> = per_scene.iter().filter(|r| r.label == *m).collect();
            MetricsReport::aggregate(m, &of_method)
        })
        .collect();
    Ok(BenchmarkReport { per_scene, aggregate })
}

fn benchmark_scene(spec: &SceneSpec, cfg: &BenchmarkConfig) -> Result<[MetricsReport; 3]> {
    let (aif, truth) = make_scene(spec, &cfg.range)?;
    let observed = render_stack(&aif, &truth, &cfg.schedule, &cfg.lens)?;
    let fv = focus_measure(&observed, cfg.window_sigma)?;
    let dff = dff_argmax_depth(&fv, &cfg.schedule)?;
    let syn_aif = composite_aif(&observed, &fv, cfg.aif_mode)?;
    let syn = estimate_depth(&observed, &syn_aif, &cfg.lens, &cfg.range, &cfg.loss, &cfg.init)?;
    let gt = estimate_depth(&observed, &aif, &cfg.lens, &cfg.range, &cfg.loss, &cfg.init)?;
    let mask = Mask::interior(spec.height, spec.width, cfg.lens.max_kernel_radius);
    let label = spec.label();
    Ok([
        MetricsReport::compute(METHOD_DFF, &label, &dff, &truth, &mask)?,
        MetricsReport::compute(METHOD_SYN_AIF, &label, &syn.depth, &truth, &mask)?,
        MetricsReport::compute(METHOD_GT_AIF, &label, &gt.depth, &truth, &mask)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(v: Vec<f64>) -> DepthMap {
        let n = v.len();
        DepthMap::new(1, n, v).unwrap()
    }

    #[test]
    fn rmse_trivial_cases() {
        let gt = map(vec![1.0; 10]);
        let mask = Mask::all(1, 10);
        assert_eq!(rmse(&gt, &gt, &mask).unwrap(), 0.0);
        assert!((rmse(&map(vec![1.3; 10]), &gt, &mask).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn delta_thresholds() {
        let gt = map(vec![1.0, 2.0, 4.0]);
        let mask = Mask::all(1, 3);
        for k in 1..=3 {
            assert_eq!(delta_accuracy(&gt, &gt, &mask, k).unwrap(), 1.0);
        }
        let p12 = map(gt.data().iter().map(|g| 1.2 * g).collect());
        assert_eq!(delta_accuracy(&p12, &gt, &mask, 1).unwrap(), 1.0);
        let p13 = map(gt.data().iter().map(|g| 1.3 * g).collect());
        assert_eq!(delta_accuracy(&p13, &gt, &mask, 1).unwrap(), 0.0);
        assert_eq!(delta_accuracy(&p13, &gt, &mask, 2).unwrap(), 1.0);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let gt = map(vec![1.0; 4]);
        let none = Mask::from_vec(1, 4, vec![false; 4]).unwrap();
        assert!(matches!(rmse(&gt, &gt, &none), Err(Error::EmptyMask)));
        assert!(matches!(delta_accuracy(&gt, &gt, &none, 1), Err(Error::EmptyMask)));
    }

    #[test]
    fn interior_mask_counts() {
        assert_eq!(Mask::interior(10, 12, 3).count(), 4 * 6);
        assert_eq!(Mask::interior(4, 4, 2).count(), 0);
    }

    #[test]
    fn scenes_are_built_as_specified() {
        let range = DepthRange::default();
        let tex = Texture::Noise {
            seed: 7,
            correlation_length: 2.0,
        };
        let (_, d) = make_scene(&SceneSpec::new(SceneKind::Plane(1.2), tex.clone(), 32, 40), &range).unwrap();
        assert!(d.data().iter().all(|&v| v == 1.2));
        let stairs = SceneKind::Staircase {
            depths: vec![0.8, 1.2, 2.4],
            band_width: 14,
        };
        let (_, d) = make_scene(&SceneSpec::new(stairs, tex.clone(), 32, 40), &range).unwrap();
        for c in 0..40 {
            let expect = [0.8, 1.2, 2.4][(c / 14).min(2)];
            assert!((0..32).all(|r| d.get(r, c) == expect));
        }
        let spec = SceneSpec {
            channels: 3,
            ..SceneSpec::new(SceneKind::Plane(2.0), tex, 48, 48)
        };
        assert_eq!(make_scene(&spec, &range).unwrap(), make_scene(&spec, &range).unwrap());
    }

    #[test]
    fn invalid_scenes_are_rejected() {
        let range = DepthRange::default();
        let tex = Texture::Checker { period: 4 };
        assert!(make_scene(&SceneSpec::new(SceneKind::Plane(12.0), tex.clone(), 32, 32), &range).is_err());
        assert!(make_scene(&SceneSpec::new(SceneKind::Plane(2.0), tex.clone(), 16, 32), &range).is_err());
        assert!(make_scene(
            &SceneSpec::new(SceneKind::Plane(2.0), Texture::Checker { period: 0 }, 32, 32),
            &range
        )
        .is_err());
        // A single checker cell over the whole frame has no texture.
        assert!(make_scene(
            &SceneSpec::new(SceneKind::Plane(2.0), Texture::Checker { period: 64 }, 32, 32),
            &range
        )
        .is_err());
    }

    #[test]
    fn scene_kind_parsing() {
        assert_eq!(SceneSpec::parse_kind("plane:1.2", 64).unwrap(), SceneKind::Plane(1.2));
        assert_eq!(
            SceneSpec::parse_kind("staircase:0.8,1.2,2.4", 64).unwrap(),
            SceneKind::Staircase {
                depths: vec![0.8, 1.2, 2.4],
                band_width: 22
            }
        );
        assert!(SceneSpec::parse_kind("cube:1", 64).is_err());
        assert!(SceneSpec::parse_kind("plane:x", 64).is_err());
    }

    #[test]
    fn aggregate_is_pixel_weighted() {
        let a = MetricsReport {
            label: "m".into(),
            scene: "a".into(),
            rmse: 1.0,
            delta1: 1.0,
            delta2: 1.0,
            delta3: 1.0,
            pixels: 1,
        };
        let b = MetricsReport {
            rmse: 0.0,
            delta1: 0.0,
            pixels: 3,
            scene: "b".into(),
            ..a.clone()
        };
        let agg = MetricsReport::aggregate("m", &[&a, &b]);
        assert!((agg.rmse - 0.5).abs() < 1e-15);
        assert_eq!(agg.delta1, 0.25);
        assert_eq!(agg.pixels, 4);
    }

    proptest! {
        #[test]
        fn metrics_match_direct_summation(
            pairs in proptest::collection::vec((0.7f64..10.0, 0.7f64..10.0), 1..64),
        ) {
            let n = pairs.len();
            let pred = map(pairs.iter().map(|p| p.0).collect());
            let gt = map(pairs.iter().map(|p| p.1).collect());
            let mask = Mask::all(1, n);
            let mut sq = 0.0;
            for (p, g) in &pairs {
                sq += (p - g) * (p - g);
            }
            let oracle = (sq / n as f64).sqrt();
            prop_assert!((rmse(&pred, &gt, &mask).unwrap() - oracle).abs() <= 1e-12);
            prop_assert_eq!(rmse(&pred, &gt, &mask).unwrap(), rmse(&gt, &pred, &mask).unwrap());
            let d: Vec<f64> = (1..=3).map(|k| delta_accuracy(&pred, &gt, &mask, k).unwrap()).collect();
            prop_assert!(d[0] <= d[1] && d[1] <= d[2]);
            let hits = pairs.iter().filter(|(p, g)| (p / g).max(g / p) < 1.25).count();
            prop_assert!((d[0] - hits as f64 / n as f64).abs() <= 1e-12);
        }
    }
}
