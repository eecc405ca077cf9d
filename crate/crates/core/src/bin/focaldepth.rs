use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};

use focaldepth::aif::{composite_aif, dff_argmax_depth, focus_measure, FocusVolume};
use focaldepth::config::{InitSpec, PipelineConfig, KEYS};
use focaldepth::estimate::{estimate_depth_monitored, Estimate, Init};
use focaldepth::eval::{make_scene, rmse, Mask, MetricsReport, METHOD_DFF, METHOD_SYN_AIF};
use focaldepth::gradcheck::{check_end_to_end, check_renderer, results_csv, GradcheckConfig};
use focaldepth::io::{
    load_depth, load_image, load_stack, save_depth, save_depth_preview, save_image, save_stack, DepthFormat,
    ImageFormat,
};
use focaldepth::optics::{calibrate_coc_threshold, check_schedule_tiling};
use focaldepth::{render_stack, DepthMap, Error, FocalStack, Image};

const SUBCOMMANDS: &[(&str, &str)] = &[
    (
        "synth",
        "Render a focal stack from an image + depth map (or a synthetic scene)",
    ),
    ("aif", "Composite an all-in-focus image from a focal stack"),
    ("dff", "Argmax depth-from-focus baseline"),
    ("estimate", "Recover depth by optimizing through the renderer"),
    ("eval", "Score a predicted depth map against ground truth"),
    (
        "gradcheck",
        "Check the renderer and end-to-end gradients against finite differences",
    ),
    ("pipeline", "synth -> aif -> estimate -> eval in one run"),
];

fn cli() -> Command {
    let mut cmd = Command::new("focaldepth")
        .about("Unsupervised depth from focal stacks")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(value_parser!(PathBuf))
                .global(true)
                .help("key = value configuration file"),
        )
        .arg(
            Arg::new("threads")
                .long("threads")
                .value_name("N")
                .value_parser(value_parser!(u16).range(1..))
                .global(true)
                .help("Worker threads (results do not depend on it)"),
        )
        .arg(
            Arg::new("dump-fv")
                .long("dump-fv")
                .action(ArgAction::SetTrue)
                .global(true)
                .help("Write the per-slice focus measure as fv/fv_SS.pfm"),
        );
    for &key in KEYS {
        cmd = cmd.arg(
            Arg::new(key)
                .long(key)
                .value_name("VALUE")
                .global(true)
                .overrides_with(key)
                .help_heading("Configuration overrides"),
        );
    }
    for &(name, about) in SUBCOMMANDS {
        cmd = cmd.subcommand(Command::new(name).about(about));
    }
    cmd
}

/// A failure inside a named stage.
struct Failure {
    stage: &'static str,
    error: Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} failed: {}", self.stage, self.error)
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Outcome<T>;
}

impl<T> Stage<T> for focaldepth::Result<T> {
    fn stage(self, stage: &'static str) -> Outcome<T> {
        self.map_err(|error| Failure { stage, error })
    }
}

enum Exit {
    Ok,
    /// The command ran but its check did not pass.
    CheckFailed,
}

struct Ctx {
    cfg: PipelineConfig,
    dump_fv: bool,
}

impl Ctx {
    fn out(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    fn stack_dir(&self) -> PathBuf {
        self.cfg.stack.clone().unwrap_or_else(|| self.out("stack"))
    }
}

fn mkdir(dir: &Path) -> focaldepth::Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> focaldepth::Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn synth(ctx: &Ctx) -> Outcome<(Image, DepthMap, FocalStack)> {
    let cfg = &ctx.cfg;
    let (aif, truth) = match (&cfg.image, &cfg.depth) {
        (Some(image), Some(depth)) => {
            let aif = load_image(image).stage("synth")?;
            let format = DepthFormat::from_path(depth).ok_or_else(|| Failure {
                stage: "synth",
                error: Error::InvalidValue(format!("{}: depth must be .png or .pfm", depth.display())),
            })?;
            let loaded = load_depth(depth, format, &cfg.range).stage("synth")?;
            if loaded.invalid + loaded.clamped > 0 {
                eprintln!(
                    "synth: {} invalid and {} out-of-range depth pixels were clamped",
                    loaded.invalid, loaded.clamped
                );
            }
            (aif, loaded.depth)
        }
        (None, None) => {
            let spec = cfg.scene_spec().stage("synth")?;
            let (aif, depth) = make_scene(&spec, &cfg.range).stage("synth")?;
            save_image(&aif, &ctx.out("aif_true.pfm"), ImageFormat::Pfm).stage("synth")?;
            save_image(&aif, &ctx.out("aif_true.png"), ImageFormat::Png8).stage("synth")?;
            save_depth(&depth, &ctx.out("depth_true.pfm"), DepthFormat::PfmM).stage("synth")?;
            (aif, depth)
        }
        _ => {
            return Err(Failure {
                stage: "synth",
                error: Error::InvalidValue("image and depth must be given together".into()),
            })
        }
    };
    let stack = render_stack(&aif, &truth, &cfg.schedule, &cfg.lens).stage("synth")?;
    save_stack(&stack, &ctx.out("stack"), cfg.stack_format).stage("synth")?;
    Ok((aif, truth, stack))
}

fn dump_fv(ctx: &Ctx, fv: &FocusVolume) -> focaldepth::Result<()> {
    let dir = ctx.out("fv");
    mkdir(&dir)?;
    for s in 0..fv.n_slices() {
        save_image(
            &fv.slice_image(s),
            &dir.join(format!("fv_{s:02}.pfm")),
            ImageFormat::Pfm,
        )?;
    }
    Ok(())
}

/// Focus volume and composite AIF, written as aif.png / aif.pfm.
fn aif_stage(ctx: &Ctx, stack: &FocalStack) -> Outcome<(FocusVolume, Image)> {
    let fv = focus_measure(stack, ctx.cfg.window_sigma).stage("aif")?;
    if ctx.dump_fv {
        dump_fv(ctx, &fv).stage("aif")?;
    }
    let aif = composite_aif(stack, &fv, ctx.cfg.aif_mode).stage("aif")?;
    save_image(&aif, &ctx.out("aif.png"), ImageFormat::Png8).stage("aif")?;
    save_image(&aif, &ctx.out("aif.pfm"), ImageFormat::Pfm).stage("aif")?;
    Ok((fv, aif))
}

fn write_depth(ctx: &Ctx, depth: &DepthMap, stem: &str) -> focaldepth::Result<()> {
    save_depth(depth, &ctx.out(&format!("{stem}.pfm")), DepthFormat::PfmM)?;
    save_depth_preview(depth, &ctx.cfg.range, &ctx.out(&format!("{stem}.png")))
}

fn load_depth_file(path: &Path, ctx: &Ctx) -> focaldepth::Result<DepthMap> {
    let format = DepthFormat::from_path(path)
        .ok_or_else(|| Error::InvalidValue(format!("{}: depth must be .png or .pfm", path.display())))?;
    Ok(load_depth(path, format, &ctx.cfg.range)?.depth)
}

fn estimate_stage(ctx: &Ctx, stack: &FocalStack, aif: &Image, truth: Option<&DepthMap>) -> Outcome<Estimate> {
    let cfg = &ctx.cfg;
    let init = match (&cfg.init, cfg.init_for_estimate()) {
        (_, Some(init)) => init,
        (InitSpec::File(p), None) => Init::Provided(load_depth_file(p, ctx).stage("estimate")?),
        _ => unreachable!(),
    };
    let mask = Mask::interior(stack.height(), stack.width(), cfg.lens.max_kernel_radius);
    let monitor = |d: &DepthMap| truth.map(|t| rmse(d, t, &mask).unwrap_or(f64::NAN)).unwrap_or(f64::NAN);
    let monitor_ref: Option<&dyn Fn(&DepthMap) -> f64> = truth.map(|_| &monitor as &dyn Fn(&DepthMap) -> f64);
    let est =
        estimate_depth_monitored(stack, aif, &cfg.lens, &cfg.range, &cfg.loss, &init, monitor_ref).stage("estimate")?;
    write_depth(ctx, &est.depth, "depth").stage("estimate")?;
    write_text(&ctx.out("trace.csv"), &est.trace_csv()).stage("estimate")?;
    if let Some(last) = est.trace.last() {
        eprintln!(
            "estimate: {} iterations, final loss {:.6e}{}",
            est.trace.len(),
            last.loss,
            if est.converged { " (converged)" } else { "" }
        );
    }
    Ok(est)
}

fn metrics_csv(rows: &[MetricsReport]) -> String {
    let mut s = format!("{}\n", MetricsReport::csv_header());
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str, stage: &'static str) -> Outcome<&'a PathBuf> {
    value.as_ref().ok_or_else(|| Failure {
        stage,
        error: Error::Config {
            key: key.into(),
            line: None,
            reason: format!("required by {stage}"),
        },
    })
}

fn run(name: &str, ctx: &Ctx) -> Outcome<Exit> {
    let cfg = &ctx.cfg;
    mkdir(&cfg.out).stage("setup")?;
    write_text(&ctx.out("effective-config.txt"), &cfg.to_text()).stage("setup")?;
    match name {
        "synth" => {
            let (_, _, stack) = synth(ctx)?;
            eprintln!("synth: wrote {} slices to {}", stack.len(), ctx.out("stack").display());
        }
        "aif" => {
            let stack = load_stack(&ctx.stack_dir()).stage("aif")?;
            aif_stage(ctx, &stack)?;
        }
        "dff" => {
            let stack = load_stack(&ctx.stack_dir()).stage("dff")?;
            let fv = focus_measure(&stack, cfg.window_sigma).stage("dff")?;
            if ctx.dump_fv {
                dump_fv(ctx, &fv).stage("dff")?;
            }
            let depth = dff_argmax_depth(&fv, stack.schedule()).stage("dff")?;
            write_depth(ctx, &depth, "dff").stage("dff")?;
        }
        "estimate" => {
            let stack = load_stack(&ctx.stack_dir()).stage("estimate")?;
            let aif = match &cfg.aif {
                Some(p) => load_image(p).stage("estimate")?,
                None => aif_stage(ctx, &stack)?.1,
            };
            let truth = match &cfg.gt {
                Some(p) => Some(load_depth_file(p, ctx).stage("estimate")?),
                None => None,
            };
            estimate_stage(ctx, &stack, &aif, truth.as_ref())?;
        }
        "eval" => {
            let pred_path = required(&cfg.pred, "pred", "eval")?;
            let gt_path = required(&cfg.gt, "gt", "eval")?;
            let pred = load_depth_file(pred_path, ctx).stage("eval")?;
            let gt = load_depth_file(gt_path, ctx).stage("eval")?;
            let mask = Mask::interior(gt.height(), gt.width(), cfg.lens.max_kernel_radius);
            let row = MetricsReport::compute(&stem(pred_path), &stem(gt_path), &pred, &gt, &mask).stage("eval")?;
            write_text(&ctx.out("metrics.csv"), &metrics_csv(std::slice::from_ref(&row))).stage("eval")?;
            println!("{}", metrics_csv(&[row]).trim_end());
        }
        "gradcheck" => {
            let gc = GradcheckConfig {
                seed: cfg.seed,
                ..GradcheckConfig::default()
            };
            let mut loss = cfg.loss;
            loss.smoothness = 0.0;
            let mut results = check_renderer(&cfg.lens, &cfg.schedule, &gc).stage("gradcheck")?;
            results.push(check_end_to_end(&cfg.lens, &cfg.schedule, &cfg.range, &loss, &gc).stage("gradcheck")?);
            let csv = results_csv(&results);
            write_text(&ctx.out("gradcheck.csv"), &csv).stage("gradcheck")?;
            print!("{csv}");
            if !results.iter().all(|r| r.passed()) {
                eprintln!("gradcheck: relative error above {:e}", gc.tolerance);
                return Ok(Exit::CheckFailed);
            }
        }
        "pipeline" => {
            let (_, truth, stack) = synth(ctx)?;
            let (fv, aif) = aif_stage(ctx, &stack)?;
            let dff = dff_argmax_depth(&fv, stack.schedule()).stage("dff")?;
            write_depth(ctx, &dff, "dff").stage("dff")?;
            let est = estimate_stage(ctx, &stack, &aif, Some(&truth))?;
            let threshold = calibrate_coc_threshold(&cfg.schedule, &cfg.lens).stage("tiling")?;
            let tiling = check_schedule_tiling(&cfg.schedule, &cfg.lens, threshold, &cfg.range).stage("tiling")?;
            write_text(&ctx.out("tiling.csv"), &tiling.to_csv()).stage("tiling")?;
            let mask = Mask::interior(truth.height(), truth.width(), cfg.lens.max_kernel_radius);
            let label = match &cfg.image {
                Some(p) => stem(p),
                None => cfg.scene_spec().stage("eval")?.label(),
            };
            let rows = [
                MetricsReport::compute(METHOD_DFF, &label, &dff, &truth, &mask).stage("eval")?,
                MetricsReport::compute(METHOD_SYN_AIF, &label, &est.depth, &truth, &mask).stage("eval")?,
            ];
            write_text(&ctx.out("metrics.csv"), &metrics_csv(&rows)).stage("eval")?;
            println!("{}", metrics_csv(&rows).trim_end());
        }
        _ => unreachable!("clap rejects unknown subcommands"),
    }
    Ok(Exit::Ok)
}

fn overrides(m: &ArgMatches) -> Vec<(String, String)> {
    KEYS.iter()
        .filter_map(|&k| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect()
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let cfg = match PipelineConfig::load(sub.get_one::<PathBuf>("config").map(PathBuf::as_path), &overrides(sub)) {
        Ok(cfg) => cfg,
        Err(e @ Error::Config { .. }) => {
            eprintln!("focaldepth: {e}");
            return ExitCode::from(2);
        }
        Err(e) => {
            eprintln!("focaldepth: cannot read config: {e}");
            return ExitCode::from(1);
        }
    };
    let ctx = Ctx {
        cfg,
        dump_fv: sub.get_flag("dump-fv"),
    };
    let result = match sub.get_one::<u16>("threads").map(|&n| n as usize) {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run(name, &ctx)),
            Err(e) => {
                eprintln!("focaldepth: cannot start {n} threads: {e}");
                return ExitCode::from(1);
            }
        },
        None => run(name, &ctx),
    };
    match result {
        Ok(Exit::Ok) => ExitCode::SUCCESS,
        Ok(Exit::CheckFailed) => ExitCode::from(1),
        Err(Failure {
            stage,
            error: error @ Error::Config { .. },
        }) => {
            eprintln!("focaldepth: {stage}: {error}");
            ExitCode::from(2)
        }
        Err(f) => {
            eprintln!("focaldepth: {f}");
            ExitCode::from(1)
        }
    }
}
