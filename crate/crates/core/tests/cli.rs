use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn focaldepth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_focaldepth"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn out_arg(dir: &Path) -> String {
    format!("--out={}", dir.display())
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn no_arguments_is_a_usage_error() {
    assert_eq!(focaldepth(&[]).status.code(), Some(2));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(focaldepth(&["synth", "--bogus=1"]).status.code(), Some(2));
}

#[test]
fn invalid_lens_value_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = focaldepth(&["synth", "--f_number=-1", &out_arg(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("f_number"), "{}", stderr(&o));
}

#[test]
fn config_file_error_names_key_and_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.txt");
    fs::write(&cfg, "# lens\nheight = 32\nlr = fast\n").unwrap();
    let o = focaldepth(&["synth", &format!("--config={}", cfg.display()), &out_arg(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("lr") && err.contains('3'), "{err}");
}

#[test]
fn missing_stack_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let o = focaldepth(&["dff", &format!("--stack={}", missing.display()), &out_arg(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("dff failed") && err.contains("nowhere"), "{err}");
}

#[test]
fn eval_without_prediction_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = focaldepth(&["eval", &out_arg(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("pred"));
}

#[test]
fn command_line_overrides_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.txt");
    fs::write(&cfg, "height = 40\nwidth = 36\nseed = 3\n").unwrap();
    let out = tmp.path().join("run");
    let o = focaldepth(&[
        "synth",
        &format!("--config={}", cfg.display()),
        "--height=48",
        &out_arg(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let effective = fs::read_to_string(out.join("effective-config.txt")).unwrap();
    assert!(effective.contains("height = 48\n"), "{effective}");
    assert!(effective.contains("width = 36\n"), "{effective}");
    assert!(effective.contains("seed = 3\n"), "{effective}");
    let schedule = fs::read_to_string(out.join("stack/schedule.csv")).unwrap();
    assert_eq!(schedule.lines().filter(|l| !l.trim().is_empty()).count(), 7);
}

#[test]
fn synth_dff_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let base = ["--height=80", "--width=80", "--scene=plane:1.6"];
    let synth_dir = tmp.path().join("synth");
    let o = focaldepth(&[&["synth", &out_arg(&synth_dir)], &base[..]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "aif_true.pfm",
        "depth_true.pfm",
        "stack/slice_00.pfm",
        "stack/slice_05.pfm",
    ] {
        assert!(synth_dir.join(f).exists(), "missing {f}");
    }

    let dff_dir = tmp.path().join("dff");
    let stack = format!("--stack={}", synth_dir.join("stack").display());
    let o = focaldepth(&[&["dff", "--dump-fv", &stack, &out_arg(&dff_dir)], &base[..]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dff_dir.join("dff.pfm").exists() && dff_dir.join("fv/fv_00.pfm").exists());

    let eval_dir = tmp.path().join("eval");
    let o = focaldepth(&[
        "eval",
        &format!("--pred={}", dff_dir.join("dff.pfm").display()),
        &format!("--gt={}", synth_dir.join("depth_true.pfm").display()),
        &out_arg(&eval_dir),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    let row: Vec<&str> = metrics.lines().nth(1).unwrap().split(',').collect();
    let rmse: f64 = row[2].parse().unwrap();
    assert!(rmse < 1e-9, "{metrics}");
}

#[test]
fn gradcheck_passes_and_reports_every_check() {
    let tmp = tempfile::tempdir().unwrap();
    let o = focaldepth(&["gradcheck", &out_arg(tmp.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("gradcheck.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7, "{csv}");
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")), "{csv}");
}
