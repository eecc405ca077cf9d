//! Flat `key = value` pipeline configuration.
//!
//! One pair per line, `#` starts a comment, blank lines are ignored. Every key
//! has a default, lengths are in meters, unknown keys are errors, and later
//! assignments (e.g. from command-line flags) override earlier ones.
//! [`PipelineConfig::to_text`] writes every resolved key and parses back to the
//! same configuration.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::aif::AifMode;
use crate::error::{Error, Result};
use crate::estimate::{Init, LossConfig, LossKind};
use crate::eval::{SceneKind, SceneSpec, Texture};
use crate::image::DepthRange;
use crate::io::ImageFormat;
use crate::optics::{default_schedule, FocusSchedule, LensConfig};

/// Where estimation starts.
#[derive(Debug, Clone, PartialEq)]
pub enum InitSpec {
    Constant(f64),
    Dff,
    /// A depth map on disk (PFM meters or 16-bit PNG millimeters).
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TextureSpec {
    Noise { correlation_length: f64 },
    Checker { period: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub lens: LensConfig,
    /// CoC diameter in pixels that bounds the depth of field in the tiling audit.
    pub coc_threshold: f64,
    pub schedule: FocusSchedule,
    pub range: DepthRange,
    pub loss: LossConfig,
    pub init: InitSpec,
    pub aif_mode: AifMode,
    pub window_sigma: f64,
    /// Synthetic scene used when no input image/depth is given, e.g. `plane:1.2`.
    pub scene: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub texture: TextureSpec,
    pub stack_format: ImageFormat,
    pub seed: u64,
    pub image: Option<PathBuf>,
    pub depth: Option<PathBuf>,
    pub stack: Option<PathBuf>,
    pub aif: Option<PathBuf>,
    pub pred: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            lens: LensConfig::default(),
            coc_threshold: 1.0,
            schedule: default_schedule(),
            range: DepthRange::default(),
            loss: LossConfig::default(),
            init: InitSpec::Dff,
            aif_mode: AifMode::Argmax,
            window_sigma: 2.0,
            scene: "plane:1.2".into(),
            height: 128,
            width: 128,
            channels: 1,
            texture: TextureSpec::Noise {
                correlation_length: 2.0,
            },
            stack_format: ImageFormat::Pfm,
            seed: 7,
            image: None,
            depth: None,
            stack: None,
            aif: None,
            pred: None,
            gt: None,
            out: PathBuf::from("out"),
        }
    }
}

/// Every accepted key, in the order [`PipelineConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "focal_length",
    "f_number",
    "pixel_pitch",
    "coc_to_sigma",
    "sigma_floor",
    "max_kernel_radius",
    "coc_threshold",
    "schedule",
    "depth_min",
    "depth_max",
    "loss",
    "smoothness",
    "lr",
    "iterations",
    "tolerance",
    "init",
    "aif_mode",
    "window_sigma",
    "scene",
    "height",
    "width",
    "channels",
    "texture",
    "stack_format",
    "seed",
    "image",
    "depth",
    "stack",
    "aif",
    "pred",
    "gt",
    "out",
];

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?} as a number"))
}

fn positive(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = num(v)?;
    if x.is_finite() && x > 0.0 {
        Ok(x)
    } else {
        Err(format!("must be positive, got {v}"))
    }
}

fn non_negative(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = num(v)?;
    if x.is_finite() && x >= 0.0 {
        Ok(x)
    } else {
        Err(format!("must be >= 0, got {v}"))
    }
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl PipelineConfig {
    /// Defaults overridden by `path` (if any), then by `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    /// Parses config text, applies `overrides`, then checks cross-key invariants.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        let mut lines: HashMap<String, usize> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.to_string(),
                line: Some(i + 1),
                reason: "expected key = value".into(),
            })?;
            let key = key.trim();
            cfg.set(key, value.trim()).map_err(|reason| Error::Config {
                key: key.to_string(),
                line: Some(i + 1),
                reason,
            })?;
            lines.insert(key.to_string(), i + 1);
        }
        for (key, value) in overrides {
            cfg.set(key, value).map_err(|reason| Error::Config {
                key: key.clone(),
                line: None,
                reason,
            })?;
            lines.remove(key);
        }
        cfg.check().map_err(|(key, reason)| Error::Config {
            line: lines.get(key).copied(),
            key: key.to_string(),
            reason,
        })?;
        Ok(cfg)
    }

    /// Assigns one key; the error is a reason string without the key.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "focal_length" => self.lens.focal_length = positive(v)?,
            "f_number" => self.lens.f_number = positive(v)?,
            "pixel_pitch" => self.lens.pixel_pitch = positive(v)?,
            "coc_to_sigma" => {
                let x = positive(v)?;
                if x > 1.0 {
                    return Err(format!("must be in (0, 1], got {v}"));
                }
                self.lens.coc_to_sigma = x;
            }
            "sigma_floor" => self.lens.sigma_floor = positive(v)?,
            "max_kernel_radius" => self.lens.max_kernel_radius = num(v)?,
            "coc_threshold" => self.coc_threshold = positive(v)?,
            "schedule" => {
                self.schedule = if v == "default" {
                    default_schedule()
                } else {
                    let d = v
                        .split(',')
                        .map(|s| num::<f64>(s.trim()))
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    FocusSchedule::new(d).map_err(|e| e.to_string())?
                }
            }
            "depth_min" => self.range.min = positive(v)?,
            "depth_max" => self.range.max = positive(v)?,
            "loss" => self.loss.kind = LossKind::parse(v).ok_or_else(|| format!("expected l1 or l2, got {v:?}"))?,
            "smoothness" => self.loss.smoothness = non_negative(v)?,
            "lr" => self.loss.learning_rate = positive(v)?,
            "iterations" => self.loss.iterations = num(v)?,
            "tolerance" => self.loss.tolerance = non_negative(v)?,
            "init" => {
                self.init = match v.split_once(':') {
                    _ if v == "dff" => InitSpec::Dff,
                    Some(("constant", d)) => InitSpec::Constant(positive(d)?),
                    Some(("file", p)) if !p.is_empty() => InitSpec::File(PathBuf::from(p)),
                    _ => return Err(format!("expected dff, constant:<m> or file:<path>, got {v:?}")),
                }
            }
            "aif_mode" => {
                self.aif_mode = match v.split_once(':') {
                    _ if v == "argmax" => AifMode::Argmax,
                    Some(("softmax", t)) => AifMode::Softmax { tau: positive(t)? },
                    _ => return Err(format!("expected argmax or softmax:<tau>, got {v:?}")),
                }
            }
            "window_sigma" => self.window_sigma = non_negative(v)?,
            "scene" => {
                SceneSpec::parse_kind(v, 32).map_err(|e| e.to_string())?;
                self.scene = v.to_string();
            }
            "height" => self.height = num(v)?,
            "width" => self.width = num(v)?,
            "channels" => {
                self.channels = num(v)?;
                if self.channels != 1 && self.channels != 3 {
                    return Err(format!("must be 1 or 3, got {v}"));
                }
            }
            "texture" => {
                self.texture = match v.split_once(':') {
                    Some(("noise", c)) => TextureSpec::Noise {
                        correlation_length: positive(c)?,
                    },
                    Some(("checker", p)) => {
                        let period: usize = num(p)?;
                        if period == 0 {
                            return Err("checker period must be positive".into());
                        }
                        TextureSpec::Checker { period }
                    }
                    _ => return Err(format!("expected noise:<length> or checker:<period>, got {v:?}")),
                }
            }
            "stack_format" => {
                self.stack_format =
                    ImageFormat::parse(v).ok_or_else(|| format!("expected pfm, png8 or png16, got {v:?}"))?
            }
            "seed" => self.seed = num(v)?,
            "image" => self.image = path(v),
            "depth" => self.depth = path(v),
            "stack" => self.stack = path(v),
            "aif" => self.aif = path(v),
            "pred" => self.pred = path(v),
            "gt" => self.gt = path(v),
            "out" => {
                self.out = path(v).ok_or("must not be empty")?;
            }
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.range.min >= self.range.max {
            return Err(("depth_max", format!("must exceed depth_min {}", self.range.min)));
        }
        if self.lens.focal_length >= self.range.min {
            return Err(("focal_length", "must be shorter than depth_min".into()));
        }
        self.schedule
            .check_range(&self.range)
            .map_err(|e| ("schedule", e.to_string()))?;
        if let InitSpec::Constant(d) = self.init {
            if !self.range.contains(d) {
                return Err(("init", format!("constant {d} m lies outside the depth range")));
            }
        }
        Ok(())
    }

    /// The full resolved configuration, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        for &key in KEYS {
            let value = match key {
                "focal_length" => self.lens.focal_length.to_string(),
                "f_number" => self.lens.f_number.to_string(),
                "pixel_pitch" => self.lens.pixel_pitch.to_string(),
                "coc_to_sigma" => self.lens.coc_to_sigma.to_string(),
                "sigma_floor" => self.lens.sigma_floor.to_string(),
                "max_kernel_radius" => self.lens.max_kernel_radius.to_string(),
                "coc_threshold" => self.coc_threshold.to_string(),
                "schedule" => join(self.schedule.distances()),
                "depth_min" => self.range.min.to_string(),
                "depth_max" => self.range.max.to_string(),
                "loss" => self.loss.kind.name().to_string(),
                "smoothness" => self.loss.smoothness.to_string(),
                "lr" => self.loss.learning_rate.to_string(),
                "iterations" => self.loss.iterations.to_string(),
                "tolerance" => self.loss.tolerance.to_string(),
                "init" => match &self.init {
                    InitSpec::Constant(d) => format!("constant:{d}"),
                    InitSpec::Dff => "dff".into(),
                    InitSpec::File(p) => format!("file:{}", p.display()),
                },
                "aif_mode" => match self.aif_mode {
                    AifMode::Argmax => "argmax".into(),
                    AifMode::Softmax { tau } => format!("softmax:{tau}"),
                },
                "window_sigma" => self.window_sigma.to_string(),
                "scene" => self.scene.clone(),
                "height" => self.height.to_string(),
                "width" => self.width.to_string(),
                "channels" => self.channels.to_string(),
                "texture" => match self.texture {
                    TextureSpec::Noise { correlation_length } => format!("noise:{correlation_length}"),
                    TextureSpec::Checker { period } => format!("checker:{period}"),
                },
                "stack_format" => self.stack_format.name().to_string(),
                "seed" => self.seed.to_string(),
                "image" => show_path(&self.image),
                "depth" => show_path(&self.depth),
                "stack" => show_path(&self.stack),
                "aif" => show_path(&self.aif),
                "pred" => show_path(&self.pred),
                "gt" => show_path(&self.gt),
                "out" => self.out.display().to_string(),
                _ => unreachable!("key list and writer disagree"),
            };
            s.push_str(&format!("{key} = {value}\n"));
        }
        s
    }

    /// The synthetic scene described by `scene`, size, channels, texture and seed.
    pub fn scene_spec(&self) -> Result<SceneSpec> {
        let kind: SceneKind = SceneSpec::parse_kind(&self.scene, self.width)?;
        let texture = match self.texture {
            TextureSpec::Noise { correlation_length } => Texture::Noise {
                seed: self.seed,
                correlation_length,
            },
            TextureSpec::Checker { period } => Texture::Checker { period },
        };
        let mut spec = SceneSpec::new(kind, texture, self.height, self.width);
        spec.channels = self.channels;
        Ok(spec)
    }

    /// Estimation start; `File` is resolved by the caller.
    pub fn init_for_estimate(&self) -> Option<Init> {
        match &self.init {
            InitSpec::Constant(d) => Some(Init::Constant(*d)),
            InitSpec::Dff => Some(Init::Dff {
                window_sigma: self.window_sigma,
            }),
            InitSpec::File(_) => None,
        }
    }
}
