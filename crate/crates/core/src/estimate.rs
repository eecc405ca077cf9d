//! Unsupervised depth recovery: photometric reconstruction loss between an
//! observed focal stack and one re-rendered from the current estimate, minimized
//! with Adam over a per-pixel inverse-depth field.

use rayon::prelude::*;

use crate::aif::{dff_argmax_depth, focus_measure};
use crate::error::{Error, Result};
use crate::image::{DepthMap, DepthRange, Image};
use crate::optics::LensConfig;
use crate::render::{adjoint, forward, BlurField, FocalStack};

/// Per-pixel inverse depth in diopters, kept inside `[1/range.max, 1/range.min]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseDepthField {
    height: usize,
    width: usize,
    range: DepthRange,
    data: Vec<f64>,
}

impl InverseDepthField {
    /// Inverts a depth map, clamping into the range.
    pub fn from_depth(depth: &DepthMap, range: DepthRange) -> Self {
        let (lo, hi) = (1.0 / range.max, 1.0 / range.min);
        Self {
            height: depth.height(),
            width: depth.width(),
            range,
            data: depth.data().iter().map(|d| (1.0 / d).clamp(lo, hi)).collect(),
        }
    }

    pub fn to_depth(&self) -> DepthMap {
        DepthMap::new(self.height, self.width, self.data.iter().map(|q| 1.0 / q).collect())
            .expect("inverse depth stays positive and finite")
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

    pub fn range(&self) -> DepthRange {
        self.range
    }

    pub fn bounds(&self) -> (f64, f64) {
        (1.0 / self.range.max, 1.0 / self.range.min)
    }

    /// Replaces one entry (clamped); used by finite-difference checks.
    pub fn with_value(&self, index: usize, q: f64) -> Self {
        let mut out = self.clone();
        let (lo, hi) = self.bounds();
        out.data[index] = q.clamp(lo, hi);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    L1,
    L2,
}

impl LossKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Some(LossKind::L1),
            "l2" => Some(LossKind::L2),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::L2 => "l2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Weight of the edge-aware smoothness term on inverse depth.
    pub smoothness: f64,
    pub iterations: usize,
    /// Adam step size in diopters.
    pub learning_rate: f64,
    /// Stop once the relative loss decrease over [`CONVERGENCE_WINDOW`]
    /// iterations falls below this; 0 disables the check.
    pub tolerance: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::L1,
            smoothness: 0.0,
            iterations: 500,
            learning_rate: 0.02,
            tolerance: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.smoothness >= 0.0 && self.smoothness.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "smoothness weight must be >= 0, got {}",
                self.smoothness
            )));
        }
        if !(self.tolerance >= 0.0 && self.tolerance.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "tolerance must be >= 0, got {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

pub const CONVERGENCE_WINDOW: usize = 20;

/// Mean L1 or L2 discrepancy over every slice, pixel and channel, with its
/// gradient with respect to `rendered`.
pub fn photometric_loss(rendered: &FocalStack, observed: &FocalStack, kind: LossKind) -> Result<(f64, Vec<Image>)> {
    if rendered.schedule() != observed.schedule() {
        return Err(Error::ScheduleMismatch(format!(
            "rendered at {:?}, observed at {:?}",
            rendered.schedule().distances(),
            observed.schedule().distances()
        )));
    }
    if !rendered.slices()[0].same_shape(&observed.slices()[0]) {
        return Err(Error::Dimension("rendered and observed stacks differ in shape".into()));
    }
    let n = (rendered.len() * rendered.slices()[0].data().len()) as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(rendered.len());
    for (r, o) in rendered.slices().iter().zip(observed.slices()) {
        let (loss, grad) = slice_loss(r.data(), o.data(), kind, n);
        total += loss;
        grads.push(Image::from_parts_unchecked(r.height(), r.width(), r.channels(), grad));
    }
    Ok((total, grads))
}

fn slice_loss(rendered: &[f64], observed: &[f64], kind: LossKind, n: f64) -> (f64, Vec<f64>) {
    let mut sum = 0.0;
    let grad = rendered
        .iter()
        .zip(observed)
        .map(|(r, o)| {
            let e = r - o;
            match kind {
                LossKind::L1 => {
                    sum += e.abs();
                    if e > 0.0 {
                        1.0 / n
                    } else if e < 0.0 {
                        -1.0 / n
                    } else {
                        0.0
                    }
                }
                LossKind::L2 => {
                    sum += e * e;
                    2.0 * e / n
                }
            }
        })
        .collect();
    (sum / n, grad)
}

fn luma_gates(aif: &Image) -> (Vec<f64>, Vec<f64>) {
    let luma = aif.luma();
    let (h, w) = (aif.height(), aif.width());
    let l = luma.data();
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w {
                gx[i] = (-(l[i + 1] - l[i]).abs()).exp();
            }
            if r + 1 < h {
                gy[i] = (-(l[i + w] - l[i]).abs()).exp();
            }
        }
    }
    (gx, gy)
}

fn check_smoothness_inputs(q: &InverseDepthField, aif: &Image) -> Result<()> {
    if q.height != aif.height() || q.width != aif.width() {
        return Err(Error::Dimension("inverse depth and image differ in size".into()));
    }
    Ok(())
}

/// `λ · Σ |∂x q|·e^{−|∂x I|} + |∂y q|·e^{−|∂y I|}` with forward differences and `I` the luma of `aif`.
pub fn smoothness_penalty(q: &InverseDepthField, aif: &Image, lambda: f64) -> Result<f64> {
    check_smoothness_inputs(q, aif)?;
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let (gx, gy) = luma_gates(aif);
    let (h, w) = (q.height, q.width);
    let mut total = 0.0;
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w {
                total += (q.data[i + 1] - q.data[i]).abs() * gx[i];
            }
            if r + 1 < h {
                total += (q.data[i + w] - q.data[i]).abs() * gy[i];
            }
        }
    }
    Ok(lambda * total)
}

/// Gradient of [`smoothness_penalty`] with respect to `q`; `sign(0) = 0` at kinks.
pub fn smoothness_grad(q: &InverseDepthField, aif: &Image, lambda: f64) -> Result<Vec<f64>> {
    check_smoothness_inputs(q, aif)?;
    let (h, w) = (q.height, q.width);
    let mut grad = vec![0.0; h * w];
    if lambda == 0.0 {
        return Ok(grad);
    }
    let (gx, gy) = luma_gates(aif);
    let sign = |v: f64| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w {
                let s = lambda * gx[i] * sign(q.data[i + 1] - q.data[i]);
                grad[i + 1] += s;
                grad[i] -= s;
            }
            if r + 1 < h {
                let s = lambda * gy[i] * sign(q.data[i + w] - q.data[i]);
                grad[i + w] += s;
                grad[i] -= s;
            }
        }
    }
    Ok(grad)
}

/// Adam moments and hyper-parameters for one parameter field.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl AdamState {
    /// β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self::with_hyper(len, learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(len: usize, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            step: 0,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            beta1,
            beta2,
            epsilon,
            learning_rate,
        }
    }
}

/// One bias-corrected Adam update, then a clamp back into the field's bounds.
///
/// A non-finite gradient is rejected before anything is modified.
pub fn adam_step(state: &mut AdamState, params: &mut InverseDepthField, grad: &[f64]) -> Result<()> {
    if grad.len() != params.data.len() || state.first_moment.len() != params.data.len() {
        return Err(Error::Dimension(
            "adam state, parameters and gradient differ in length".into(),
        ));
    }
    if !((0.0..1.0).contains(&state.beta1) && (0.0..1.0).contains(&state.beta2)) {
        return Err(Error::InvalidValue("adam betas must lie in [0, 1)".into()));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            row: i / params.width,
            col: i % params.width,
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (lo, hi) = params.bounds();
    for (((p, m), v), &g) in params
        .data
        .iter_mut()
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
        .zip(grad)
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p = (*p - state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon)).clamp(lo, hi);
    }
    Ok(())
}

/// The scalar objective `photometric + smoothness` as a function of inverse depth.
pub struct Objective<'a> {
    pub observed: &'a FocalStack,
    pub aif: &'a Image,
    pub lens: &'a LensConfig,
    pub kind: LossKind,
    pub smoothness: f64,
}

impl<'a> Objective<'a> {
    pub fn new(observed: &'a FocalStack, aif: &'a Image, lens: &'a LensConfig, cfg: &LossConfig) -> Result<Self> {
        if !observed.slices()[0].same_shape(aif) {
            return Err(Error::Dimension(format!(
                "AIF is {}x{}x{}, observed slices are {}x{}x{}",
                aif.height(),
                aif.width(),
                aif.channels(),
                observed.height(),
                observed.width(),
                observed.channels()
            )));
        }
        Ok(Self {
            observed,
            aif,
            lens,
            kind: cfg.kind,
            smoothness: cfg.smoothness,
        })
    }

    fn blur_fields(&self, q: &InverseDepthField, radii: Option<&[Vec<usize>]>) -> Result<Vec<BlurField>> {
        let depth = q.to_depth();
        self.observed
            .schedule()
            .distances()
            .iter()
            .enumerate()
            .map(|(s, &f)| match radii {
                Some(r) => BlurField::with_radii(&depth, f, self.lens, &r[s]),
                None => BlurField::new(&depth, f, self.lens),
            })
            .collect()
    }

    /// Truncation radii the renderer would pick at `q`, one map per slice.
    pub fn radii(&self, q: &InverseDepthField) -> Result<Vec<Vec<usize>>> {
        Ok(self
            .blur_fields(q, None)?
            .into_iter()
            .map(|b| b.radii().to_vec())
            .collect())
    }

    /// Loss at `q`, optionally with frozen truncation radii.
    pub fn loss(&self, q: &InverseDepthField, radii: Option<&[Vec<usize>]>) -> Result<f64> {
        let blurs = self.blur_fields(q, radii)?;
        let outs: Vec<Vec<f64>> = blurs.par_iter().map(|b| forward(self.aif, b).out).collect();
        let n = (outs.len() * outs[0].len()) as f64;
        let mut total = 0.0;
        for (out, obs) in outs.iter().zip(self.observed.slices()) {
            total += slice_loss(out, obs.data(), self.kind, n).0;
        }
        Ok(total + smoothness_penalty(q, self.aif, self.smoothness)?)
    }

    /// `rendered − observed` for every slice, concatenated in schedule order.
    pub fn residuals(&self, q: &InverseDepthField, radii: Option<&[Vec<usize>]>) -> Result<Vec<f64>> {
        let blurs = self.blur_fields(q, radii)?;
        let outs: Vec<Vec<f64>> = blurs.par_iter().map(|b| forward(self.aif, b).out).collect();
        Ok(outs
            .iter()
            .zip(self.observed.slices())
            .flat_map(|(out, obs)| out.iter().zip(obs.data()).map(|(r, o)| r - o))
            .collect())
    }

    /// Loss and `∂loss/∂q`.
    pub fn loss_and_gradient(&self, q: &InverseDepthField, radii: Option<&[Vec<usize>]>) -> Result<(f64, Vec<f64>)> {
        let blurs = self.blur_fields(q, radii)?;
        let fwds: Vec<_> = blurs.par_iter().map(|b| forward(self.aif, b)).collect();
        let n = (fwds.len() * fwds[0].out.len()) as f64;
        let mut total = 0.0;
        let mut upstream = Vec::with_capacity(fwds.len());
        for (f, obs) in fwds.iter().zip(self.observed.slices()) {
            let (l, g) = slice_loss(&f.out, obs.data(), self.kind, n);
            total += l;
            upstream.push(g);
        }
        let per_slice: Vec<Vec<f64>> = blurs
            .par_iter()
            .zip(fwds.par_iter())
            .zip(upstream.par_iter())
            .map(|((b, f), u)| adjoint(self.aif, b, f, u))
            .collect();
        let mut grad = smoothness_grad(q, self.aif, self.smoothness)?;
        for (i, g) in grad.iter_mut().enumerate() {
            let dl_ddepth: f64 = per_slice.iter().map(|s| s[i]).sum();
            // depth = 1/q
            let qi = q.data[i];
            *g += dl_ddepth * (-1.0 / (qi * qi));
        }
        total += smoothness_penalty(q, self.aif, self.smoothness)?;
        Ok((total, grad))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Constant(f64),
    /// Argmax depth-from-focus on the observed stack with this focus-measure window.
    Dff {
        window_sigma: f64,
    },
    Provided(DepthMap),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub loss: f64,
    /// Filled when a monitor was supplied.
    pub rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub depth: DepthMap,
    pub trace: Vec<TraceEntry>,
    /// True when the tolerance test, not the budget, ended the run.
    pub converged: bool,
}

impl Estimate {
    pub fn losses(&self) -> Vec<f64> {
        self.trace.iter().map(|e| e.loss).collect()
    }

    pub fn trace_csv(&self) -> String {
        let mut s = String::from("iteration,loss,rmse_if_gt_available\n");
        for e in &self.trace {
            let rmse = e.rmse.map(|r| r.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{}\n", e.iteration, e.loss, rmse));
        }
        s
    }
}

pub fn initial_depth(observed: &FocalStack, range: &DepthRange, init: &Init) -> Result<DepthMap> {
    let (h, w) = (observed.height(), observed.width());
    let mut depth = match init {
        Init::Constant(d) => DepthMap::filled(h, w, *d)?,
        Init::Dff { window_sigma } => dff_argmax_depth(&focus_measure(observed, *window_sigma)?, observed.schedule())?,
        Init::Provided(map) => {
            if map.height() != h || map.width() != w {
                return Err(Error::Dimension("initial depth map does not match the stack".into()));
            }
            map.clone()
        }
    };
    depth.clamp_to(range);
    Ok(depth)
}

/// Recovers depth from `observed` given an all-in-focus image.
///
/// Each iteration renders the stack at the current estimate, measures the
/// photometric loss, back-propagates it to inverse depth and takes one Adam
/// step. The loss trace is not monotone in general.
pub fn estimate_depth(
    observed: &FocalStack,
    aif: &Image,
    lens: &LensConfig,
    range: &DepthRange,
    cfg: &LossConfig,
    init: &Init,
) -> Result<Estimate> {
    estimate_depth_monitored(observed, aif, lens, range, cfg, init, None)
}

/// [`estimate_depth`] with a per-iteration monitor (e.g. RMSE against ground truth)
/// evaluated on the depth that produced each trace entry.
pub fn estimate_depth_monitored(
    observed: &FocalStack,
    aif: &Image,
    lens: &LensConfig,
    range: &DepthRange,
    cfg: &LossConfig,
    init: &Init,
    monitor: Option<&dyn Fn(&DepthMap) -> f64>,
) -> Result<Estimate> {
    cfg.validate()?;
    range.validate()?;
    lens.validate(range)?;
    let objective = Objective::new(observed, aif, lens, cfg)?;
    let start = initial_depth(observed, range, init)?;
    let mut q = InverseDepthField::from_depth(&start, *range);
    let mut adam = AdamState::new(q.data.len(), cfg.learning_rate);
    let mut trace: Vec<TraceEntry> = Vec::with_capacity(cfg.iterations);
    let mut converged = false;

    for iteration in 0..cfg.iterations {
        let (loss, grad) = objective.loss_and_gradient(&q, None)?;
        let rmse = monitor.map(|m| m(&q.to_depth()));
        trace.push(TraceEntry { iteration, loss, rmse });
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration,
                trace: trace.iter().map(|e| e.loss).collect(),
            });
        }
        if loss == 0.0 {
            converged = true;
            break;
        }
        if cfg.tolerance > 0.0 && iteration >= CONVERGENCE_WINDOW {
            let before = trace[iteration - CONVERGENCE_WINDOW].loss;
            if (before - loss) / before < cfg.tolerance {
                converged = true;
                break;
            }
        }
        adam_step(&mut adam, &mut q, &grad)?;
    }
    Ok(Estimate {
        depth: q.to_depth(),
        trace,
        converged,
    })
}
