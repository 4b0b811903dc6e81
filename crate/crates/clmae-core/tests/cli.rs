//! End-to-end runs of the installed binary, one subprocess per scenario.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clmae")).args(args).output().expect("binary spawns")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn assert_code(out: &Output, want: i32, what: &str) {
    assert_eq!(
        out.status.code(),
        Some(want),
        "{what}: stdout {:?} stderr {:?}",
        stdout(out),
        stderr(out)
    );
}

const TOY_CONFIG: &str = "# toy geometry for subprocess tests\n\
h = 16\nw = 16\nc = 1\np = 8\nd = 8\nheads = 2\n\
enc_depth = 1\ndec_depth = 1\ndec_width = 8\ndec_heads = 2\n\
cmm_depth = 1\nmlp_ratio = 2\n\
t_total = 4\nbatch = 4\nwarmup = 2\ncheckpoint_every = 2\nmask_dump_steps = 0\n";

struct Workspace {
    _keep: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let keep = tempfile::tempdir().expect("temp dir");
        let root = keep.path().to_path_buf();
        Workspace { _keep: keep, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn write_config(&self) -> String {
        let p = self.path("toy.cfg");
        std::fs::write(&p, TOY_CONFIG).unwrap();
        p.to_string_lossy().into_owned()
    }

    fn gen(&self, name: &str, classes: &str, per_class: &str, seed: &str) -> String {
        let out = self.arg(name);
        let o = run(&[
            "gen-data",
            "--classes",
            classes,
            "--per-class",
            per_class,
            "--h",
            "16",
            "--w",
            "16",
            "--c",
            "1",
            "--seed",
            seed,
            "--out",
            &out,
        ]);
        assert_code(&o, 0, "gen-data");
        out
    }

    /// Pretrains into `out_name` and returns (out dir, config echo path).
    fn pretrain(&self, out_name: &str, data: &str, seed: &str, baseline: bool) -> (String, String) {
        let cfg = self.write_config();
        let out = self.arg(out_name);
        let cmd = if baseline { "pretrain-baseline" } else { "pretrain" };
        let o = run(&[cmd, "--config", &cfg, "--data", data, "--seed", seed, "--out", &out]);
        assert_code(&o, 0, cmd);
        let echo = format!("{out}/config.txt");
        assert!(Path::new(&echo).exists());
        (out, echo)
    }
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let o = run(&[]);
    assert_code(&o, 1, "bare invocation");
    assert!(stderr(&o).to_lowercase().contains("usage"), "got {:?}", stderr(&o));

    let o = run(&["no-such-command"]);
    assert_code(&o, 1, "unknown subcommand");

    let o = run(&["pretrain", "--bogus-flag"]);
    assert_code(&o, 1, "unknown flag");

    let o = run(&["--help"]);
    assert_code(&o, 0, "help");
    let text = stdout(&o);
    for sub in ["gen-data", "pretrain", "eval-fewshot", "grad-check", "resume"] {
        assert!(text.contains(sub), "help must list {sub}");
    }

    let o = run(&["--version"]);
    assert_code(&o, 0, "version");
}

#[test]
fn gen_data_is_deterministic_and_validates_extents() {
    let ws = Workspace::new();
    let a = ws.gen("a.clmds", "3", "4", "9");
    let b = ws.gen("b.clmds", "3", "4", "9");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let c = ws.gen("c.clmds", "3", "4", "10");
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());

    let o = run(&["gen-data", "--h", "0", "--out", &ws.arg("bad.clmds")]);
    assert_code(&o, 2, "degenerate extent");
    assert!(!ws.path("bad.clmds").exists());
}

#[test]
fn gen_data_reports_the_pixel_floor() {
    let ws = Workspace::new();
    let o = run(&[
        "gen-data",
        "--classes",
        "10",
        "--per-class",
        "8",
        "--seed",
        "4",
        "--out",
        &ws.arg("big.clmds"),
    ]);
    assert_code(&o, 0, "default-size gen-data");
    let text = stdout(&o);
    assert!(text.contains("pixel 1-NN"), "got {text:?}");
    assert!(text.contains("wrote 80 images"), "got {text:?}");
}

#[test]
fn pretrain_is_reproducible_across_processes() {
    let ws = Workspace::new();
    let data = ws.gen("train.clmds", "3", "4", "9");
    let (out1, _) = ws.pretrain("run1", &data, "7", false);
    let (out2, _) = ws.pretrain("run2", &data, "7", false);
    let m1 = std::fs::read(format!("{out1}/metrics.csv")).unwrap();
    let m2 = std::fs::read(format!("{out2}/metrics.csv")).unwrap();
    assert!(!m1.is_empty());
    assert_eq!(m1, m2, "same seed, same bytes");
    assert!(Path::new(&format!("{out1}/ckpt_000004.bin")).exists());
    assert!(Path::new(&format!("{out1}/masks/mask_0_0.pgm")).exists());

    let (out3, _) = ws.pretrain("run3", &data, "8", false);
    let m3 = std::fs::read(format!("{out3}/metrics.csv")).unwrap();
    assert_ne!(m1, m3, "a different seed must change the log");
}

#[test]
fn resume_matches_the_uninterrupted_run() {
    let ws = Workspace::new();
    let data = ws.gen("train.clmds", "3", "4", "9");
    let cfg = ws.write_config();
    let (full, _) = ws.pretrain("full", &data, "7", false);
    let tail = ws.arg("tail");
    let o = run(&[
        "resume",
        "--checkpoint",
        &format!("{full}/ckpt_000002.bin"),
        "--config",
        &cfg,
        "--data",
        &data,
        "--seed",
        "7",
        "--out",
        &tail,
    ]);
    assert_code(&o, 0, "resume");
    let a = std::fs::read(format!("{full}/ckpt_000004.bin")).unwrap();
    let b = std::fs::read(format!("{tail}/ckpt_000004.bin")).unwrap();
    assert_eq!(a, b, "resumed trajectory must land on the same bytes");
}

#[test]
fn eval_nn_works_on_pixels_and_encoders() {
    let ws = Workspace::new();
    let train = ws.gen("train.clmds", "3", "4", "9");
    let test = ws.gen("test.clmds", "3", "4", "99");

    let results = ws.arg("pix.csv");
    let o = run(&[
        "eval-nn",
        "--pixels",
        "--train-data",
        &train,
        "--test-data",
        &test,
        "--tag",
        "pixel",
        "--results",
        &results,
    ]);
    assert_code(&o, 0, "pixel NN");
    let text = std::fs::read_to_string(&results).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "protocol,tag,k,acc1,acc5,seeds");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("nn,pixel,,"), "got {:?}", lines[1]);

    let (out, echo) = ws.pretrain("run", &train, "7", false);
    let results = ws.arg("enc.csv");
    let o = run(&[
        "eval-nn",
        "--checkpoint",
        &format!("{out}/ckpt_000004.bin"),
        "--train-data",
        &train,
        "--test-data",
        &test,
        "--results",
        &results,
        "--config",
        &echo,
    ]);
    assert_code(&o, 0, "encoder NN via the config echo");
    let text = std::fs::read_to_string(&results).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("nn,encoder,,"));

    let o = run(&[
        "eval-nn",
        "--train-data",
        &train,
        "--test-data",
        &test,
        "--results",
        &ws.arg("none.csv"),
    ]);
    assert_code(&o, 2, "checkpoint required without --pixels");
}

#[test]
fn eval_probe_and_fewshot_emit_rows() {
    let ws = Workspace::new();
    let train = ws.gen("train.clmds", "3", "4", "9");
    let test = ws.gen("test.clmds", "3", "4", "99");
    let (out, echo) = ws.pretrain("run", &train, "7", false);
    let ckpt = format!("{out}/ckpt_000004.bin");

    let results = ws.arg("probe.csv");
    let o = run(&[
        "eval-probe",
        "--checkpoint",
        &ckpt,
        "--train-data",
        &train,
        "--test-data",
        &test,
        "--results",
        &results,
        "--config",
        &echo,
        "--eval-seed",
        "5",
    ]);
    assert_code(&o, 0, "probe");
    let text = std::fs::read_to_string(&results).unwrap();
    let row = text.lines().nth(1).unwrap();
    assert!(row.starts_with("probe,encoder,,"), "got {row:?}");
    assert!(row.ends_with("5;6;7"), "got {row:?}");

    let results = ws.arg("shots.csv");
    let o = run(&[
        "eval-fewshot",
        "--shots",
        "1,2",
        "--checkpoint",
        &ckpt,
        "--train-data",
        &train,
        "--test-data",
        &test,
        "--results",
        &results,
        "--config",
        &echo,
    ]);
    assert_code(&o, 0, "fewshot");
    let text = std::fs::read_to_string(&results).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("fewshot,encoder,1,"));
    assert!(lines[2].starts_with("fewshot,encoder,2,"));

    let o = run(&[
        "eval-fewshot",
        "--shots",
        "5",
        "--checkpoint",
        &ckpt,
        "--train-data",
        &train,
        "--test-data",
        &test,
        "--results",
        &ws.arg("over.csv"),
        "--config",
        &echo,
    ]);
    assert_code(&o, 2, "more shots than class rows");
    assert!(stderr(&o).contains("class"), "got {:?}", stderr(&o));
}

#[test]
fn dump_masks_requires_a_masking_module() {
    let ws = Workspace::new();
    let data = ws.gen("train.clmds", "3", "4", "9");
    let (cur, echo) = ws.pretrain("cur", &data, "7", false);
    let vis = ws.arg("vis");
    let o = run(&[
        "dump-masks",
        "--checkpoint",
        &format!("{cur}/ckpt_000004.bin"),
        "--data",
        &data,
        "--out",
        &vis,
        "--count",
        "2",
        "--config",
        &echo,
    ]);
    assert_code(&o, 0, "dump from a curriculum checkpoint");
    assert!(ws.path("vis").join("mask_4_0.pgm").exists());
    assert!(ws.path("vis").join("mask_4_index.csv").exists());

    let (base, becho) = ws.pretrain("base", &data, "7", true);
    let o = run(&[
        "dump-masks",
        "--checkpoint",
        &format!("{base}/ckpt_000004.bin"),
        "--data",
        &data,
        "--out",
        &ws.arg("vis2"),
        "--config",
        &becho,
    ]);
    assert_code(&o, 2, "baseline checkpoints have no masks");
    assert!(stderr(&o).contains("no masking module"), "got {:?}", stderr(&o));
}

#[test]
fn set_overrides_and_bad_settings() {
    let ws = Workspace::new();
    let data = ws.gen("train.clmds", "3", "4", "9");
    let cfg = ws.write_config();
    let out = ws.arg("short");
    let o = run(&[
        "pretrain",
        "--config",
        &cfg,
        "--set",
        "t_total=2",
        "--set",
        "checkpoint_every=1",
        "--data",
        &data,
        "--out",
        &out,
    ]);
    assert_code(&o, 0, "pretrain with --set overrides");
    let metrics = std::fs::read_to_string(format!("{out}/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4, "header plus steps 0..=2");

    let o = run(&["pretrain", "--config", &cfg, "--set", "no_such_key=1", "--data", &data]);
    assert_code(&o, 2, "unknown key");
    assert!(stderr(&o).contains("no_such_key"));

    let o = run(&["pretrain", "--config", &cfg, "--set", "justakey", "--data", &data]);
    assert_code(&o, 2, "missing equals sign");

    let o = run(&["pretrain", "--config", &cfg, "--set", "sigma=-1", "--data", &data]);
    assert_code(&o, 2, "rejected value");

    let o = run(&["pretrain", "--config", &ws.arg("missing.cfg"), "--data", &data]);
    assert_code(&o, 2, "missing config file");
}

#[test]
fn grad_check_prints_every_component() {
    let o = run(&["grad-check", "--seed", "3"]);
    assert_code(&o, 0, "grad-check");
    let text = stdout(&o);
    for name in ["matmul", "attention", "layernorm", "loss_curriculum", "max relative error"] {
        assert!(text.contains(name), "missing {name} in {text:?}");
    }
}
