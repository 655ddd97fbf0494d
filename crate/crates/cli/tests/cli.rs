use std::fs;
use std::path::Path;
use std::process::Command;

use dymamba::checkpoint;
use dymamba::motion::read_motion;
use dymamba_cli::{main_with_args, EXIT_CONFIG, EXIT_IO};

const TINY: &str = r#"
seed = 5

[model]
n_blocks = 1
latent_dim = 8
d_state = 2
d_text = 8

[diffusion]
steps = 20
ddim_steps = 4

[train]
epochs = 1
batch_size = 4

[data]
n_samples = 8
train_len = 12

[eval]
samples_per_horizon = 2
metric_samples = 8
mmodality_prompts = 2
mmodality_k = 3
rprecision_pool = 8
diversity_pairs = 10
ndms_subsample = 64
"#;

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn cli(args: &[&str]) -> Run {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("dymamba").chain(args.iter().copied());
    let code = main_with_args(argv, &mut out, &mut err);
    Run {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

/// A workspace with the tiny config written and paths pointing inside it.
struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = format!(
            "{TINY}\n[paths]\ncorpus = {:?}\ncheckpoint = {:?}\n",
            dir.path().join("corpus"),
            dir.path().join("ck")
        );
        fs::write(dir.path().join("run.toml"), config).unwrap();
        Workspace { dir }
    }

    fn path(&self, rel: &str) -> String {
        self.dir.path().join(rel).to_string_lossy().into_owned()
    }

    fn run(&self, args: &[&str]) -> Run {
        let config = self.path("run.toml");
        let mut full = vec!["--config", config.as_str()];
        full.extend_from_slice(args);
        let r = cli(&full);
        assert!(r.code == 0 || !r.err.is_empty(), "silent failure");
        r
    }

    fn trained(&self) -> &Self {
        assert_eq!(self.run(&["datagen"]).code, 0);
        let r = self.run(&["train"]);
        assert_eq!(r.code, 0, "{}", r.err);
        self
    }
}

fn hash_line(out: &str) -> String {
    out.lines().find(|l| l.starts_with("hash ")).unwrap().to_string()
}

#[test]
fn datagen_is_reproducible_and_reports_its_manifest() {
    let ws = Workspace::new();
    let first = ws.run(&["datagen"]);
    assert_eq!(first.code, 0, "{}", first.err);
    assert!(first.out.contains("manifest.tsv"));
    let again = ws.run(&["datagen", "--out", &ws.path("copy")]);
    assert_eq!(hash_line(&first.out), hash_line(&again.out));
    let other = ws.run(&["datagen", "--out", &ws.path("other"), "--seed", "6"]);
    assert_ne!(hash_line(&first.out), hash_line(&other.out));
}

#[test]
fn empty_corpus_writes_an_empty_manifest() {
    let ws = Workspace::new();
    let r = ws.run(&["datagen", "--n-samples", "0"]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert_eq!(
        fs::read_to_string(ws.dir.path().join("corpus/manifest.tsv")).unwrap(),
        ""
    );
}

#[test]
fn unwritable_output_is_an_io_error() {
    let ws = Workspace::new();
    fs::write(ws.dir.path().join("blocker"), "file").unwrap();
    let r = ws.run(&["datagen", "--out", &ws.path("blocker/corpus")]);
    assert_eq!(r.code, EXIT_IO, "{}", r.err);
}

#[test]
fn invalid_configuration_is_a_config_error() {
    let ws = Workspace::new();
    assert_eq!(ws.run(&["datagen", "--latent-dim", "7"]).code, EXIT_CONFIG);
    assert_eq!(ws.run(&["datagen", "--cond-mode", "sideways"]).code, EXIT_CONFIG);
    fs::write(ws.dir.path().join("bad.toml"), "[model]\nbogus = 1\n").unwrap();
    assert_eq!(cli(&["--config", &ws.path("bad.toml"), "datagen"]).code, EXIT_CONFIG);
    assert_eq!(cli(&["--config", &ws.path("missing.toml"), "datagen"]).code, EXIT_IO);
}

#[test]
fn training_smoke_run_and_resume() {
    let ws = Workspace::new();
    ws.trained();
    let ck = ws.dir.path().join("ck");
    let m = checkpoint::read_manifest(&ck).unwrap();
    assert_eq!(m.epoch, 1);
    assert!(m.losses[0].is_finite());

    let r = ws.run(&["train", "--resume", "--epochs", "3"]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(r.out.contains("from epoch 1"), "{}", r.out);
    assert!(r.out.contains("epoch 3/3"));
    let m = checkpoint::read_manifest(&ck).unwrap();
    assert_eq!(m.epoch, 3);
    assert_eq!(m.losses.len(), 3);
    assert_eq!(m.run.train.epochs, 3);
}

#[test]
fn resume_against_a_different_corpus_is_refused() {
    let ws = Workspace::new();
    ws.trained();
    assert_eq!(ws.run(&["datagen", "--seed", "99", "--n-samples", "8"]).code, 0);
    let r = ws.run(&["train", "--resume", "--epochs", "2"]);
    assert_eq!(r.code, EXIT_CONFIG, "{}", r.err);
    assert!(r.err.contains("corpus hash"));
}

#[test]
fn missing_corpus_or_checkpoint_is_an_io_error() {
    let ws = Workspace::new();
    assert_eq!(ws.run(&["train"]).code, EXIT_IO);
    assert_eq!(
        ws.run(&["sample", "--prompt", "hi", "--out", &ws.path("x.dym")]).code,
        EXIT_IO
    );
}

#[test]
fn sampling_is_deterministic_and_length_free() {
    let ws = Workspace::new();
    ws.trained();
    let (a, b) = (ws.path("a.dym"), ws.path("b.dym"));
    for out in [&a, &b] {
        let r = ws.run(&[
            "sample",
            "--prompt",
            "two people shake hands",
            "--seed",
            "3",
            "--out",
            out,
        ]);
        assert_eq!(r.code, 0, "{}", r.err);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let long = ws.path("long.dym");
    assert_eq!(
        ws.run(&["sample", "--prompt", "dance", "--frames", "48", "--out", &long])
            .code,
        0
    );
    assert_eq!(read_motion(Path::new(&long)).unwrap().len(), 48);

    let null = ws.path("null.dym");
    let r = ws.run(&["sample", "--out", &null]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(read_motion(Path::new(&null)).unwrap().texts.is_empty());
}

#[test]
fn evaluation_report_has_every_horizon_and_is_reproducible() {
    let ws = Workspace::new();
    ws.trained();
    let (a, b) = (ws.path("a.txt"), ws.path("b.txt"));
    for out in [&a, &b] {
        let r = ws.run(&["eval", "--out", out]);
        assert_eq!(r.code, 0, "{}", r.err);
        assert_eq!(r.out.lines().filter(|l| l.starts_with("horizon ")).count(), 3);
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert_eq!(fs::read(ws.path("a.csv")).unwrap(), fs::read(ws.path("b.csv")).unwrap());

    let r = ws.run(&["eval", "--multipliers", "1,2", "--out", &ws.path("two.txt")]);
    assert_eq!(r.out.lines().filter(|l| l.starts_with("horizon ")).count(), 2);
}

#[test]
fn ablation_grid_has_six_rows() {
    let ws = Workspace::new();
    assert_eq!(ws.run(&["datagen"]).code, 0);
    let grid = ws.path("grid");
    let r = ws.run(&["ablate", "--out", &grid]);
    assert_eq!(r.code, 0, "{}", r.err);
    let table = fs::read_to_string(Path::new(&grid).join("ablation.tsv")).unwrap();
    assert_eq!(table.lines().count(), 7);
    for cell in [
        "adaln\tconcat",
        "adaln\tadd",
        "prepend\tconcat",
        "prepend\tadd",
        "both\tconcat",
        "both\tadd",
    ] {
        assert!(table.contains(cell), "{table}");
    }
    let reused = ws.run(&["ablate", "--out", &grid, "--reuse"]);
    assert_eq!(reused.code, 0, "{}", reused.err);
    assert_eq!(
        fs::read_to_string(Path::new(&grid).join("ablation.tsv")).unwrap(),
        table
    );

    fs::remove_dir_all(Path::new(&grid).join("both-add")).unwrap();
    assert_eq!(ws.run(&["ablate", "--out", &grid, "--reuse"]).code, EXIT_IO);
}

#[test]
fn concurrent_run_on_a_locked_output_is_refused() {
    let ws = Workspace::new();
    fs::write(ws.path("corpus.lock"), "123").unwrap();
    let r = ws.run(&["datagen"]);
    assert_eq!(r.code, EXIT_IO);
    assert!(r.err.contains("locked"));
}

#[test]
fn binary_reads_environment_overrides() {
    let ws = Workspace::new();
    let bin = env!("CARGO_BIN_EXE_dymamba");
    let run = |seed: &str, out: &str| {
        Command::new(bin)
            .args(["datagen", "--out", out])
            .env("DYMAMBA_CONFIG", ws.path("run.toml"))
            .env("DYMAMBA_SEED", seed)
            .output()
            .unwrap()
    };
    let a = run("11", &ws.path("a"));
    let b = run("11", &ws.path("b"));
    let flag = Command::new(bin)
        .args(["datagen", "--seed", "11", "--out", &ws.path("c")])
        .env("DYMAMBA_CONFIG", ws.path("run.toml"))
        .env("DYMAMBA_SEED", "12")
        .output()
        .unwrap();
    let default = run("5", &ws.path("d"));
    assert!(a.status.success());
    let hash = |o: &std::process::Output| hash_line(&String::from_utf8_lossy(&o.stdout));
    assert_eq!(hash(&a), hash(&b));
    assert_eq!(hash(&a), hash(&flag), "flags must win over the environment");
    assert_ne!(hash(&a), hash(&default));

    let bad = Command::new(bin).args(["train", "--lr", "-1"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn grad_check_command_passes_on_one_seed() {
    let r = cli(&["grad-check", "--seeds", "1"]);
    assert_eq!(r.code, 0, "{}{}", r.out, r.err);
    assert!(r.out.contains("denoise_step_both"));
    assert!(r.out.contains("scan_vs_chunked"));
}
