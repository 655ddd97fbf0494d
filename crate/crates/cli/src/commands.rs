use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dymamba::checkpoint::{self, Checkpoint, CheckpointManifest};
use dymamba::denoiser::{CondMode, CrossMode, DenoiserParams};
use dymamba::diffusion::Trainer;
use dymamba::eval::{evaluate, EvalReport};
use dymamba::motion::{corpus_hash, generate_dataset, read_corpus, write_corpus, write_motion, PoseStats, TEMPLATES};
use dymamba::oracle::{grad_suite, scan_suite, OracleResult};
use dymamba::pipeline::{training_examples, Generator};
use dymamba::{rng, RunConfig};

use crate::args::{Cli, Command, Overrides};
use crate::error::{CliError, CliResult};
use crate::lock::OutputLock;

/// File written next to a generated corpus recording the config that produced it.
pub const CORPUS_CONFIG_FILE: &str = "run.toml";
pub const ABLATION_TABLE: &str = "ablation.tsv";

/// `base`, replaced by the config file when one is given, then the flag overrides.
pub fn resolve_config(config: Option<&Path>, overrides: &Overrides, base: RunConfig) -> CliResult<RunConfig> {
    let mut run = match config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            dymamba::Error::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
            other => other.into(),
        })?,
        None => base,
    };
    overrides.apply(&mut run);
    run.validate()?;
    Ok(run)
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> CliResult<()> {
    let config = cli.config.as_deref();
    match &cli.command {
        Command::Datagen { out: dir } => {
            let run = resolve_config(config, &cli.overrides, RunConfig::default())?;
            let dir = dir.clone().unwrap_or_else(|| run.paths.corpus.clone());
            let summary = datagen(&run, &dir)?;
            writeln!(out, "manifest {}", summary.manifest.display())?;
            writeln!(out, "hash {}", summary.hash)?;
            writeln!(out, "samples {}", summary.samples)?;
        }
        Command::Train { resume } => {
            let mut run = resolve_config(config, &cli.overrides, RunConfig::default())?;
            if *resume && config.is_none() {
                let saved = checkpoint::read_manifest(&run.paths.checkpoint)?;
                run = resolve_config(None, &cli.overrides, saved.run)?;
            }
            let dir = run.paths.checkpoint.clone();
            let outcome = train(&run, &dir, *resume, out)?;
            writeln!(out, "checkpoint {}", outcome.dir.display())?;
        }
        Command::Sample {
            prompt,
            frames,
            out: file,
        } => {
            let run = resolve_config(config, &cli.overrides, RunConfig::default())?;
            let path = sample(&run.paths.checkpoint, &cli.overrides, prompt, *frames, file)?;
            writeln!(out, "wrote {}", path.display())?;
        }
        Command::Eval { multipliers, out: file } => {
            let run = resolve_config(config, &cli.overrides, RunConfig::default())?;
            let report = eval(
                &run.paths.checkpoint,
                &run.paths.corpus,
                &cli.overrides,
                multipliers.clone(),
                file,
            )?;
            for h in &report.horizons {
                writeln!(out, "horizon {} frames: ndms {:.6} ± {:.6}", h.frames, h.mean, h.std)?;
            }
            writeln!(out, "flatness {:.6}", report.flatness)?;
            writeln!(out, "report {}", file.display())?;
        }
        Command::Ablate { out: dir, reuse } => {
            let run = resolve_config(config, &cli.overrides, RunConfig::default())?;
            let rows = ablate(&run, dir, *reuse, out)?;
            write!(out, "{}", ablation_table(&rows))?;
        }
        Command::GradCheck { seeds } => {
            let results = grad_check((0..*seeds).collect::<Vec<_>>().as_slice())?;
            for r in &results {
                let status = if r.passed() { "ok" } else { "FAIL" };
                writeln!(
                    out,
                    "{:28} max_err {:.3e}  tol {:.0e}  cases {:3}  {status}",
                    r.name, r.max_error, r.tolerance, r.cases
                )?;
            }
            let failed: Vec<&str> = results
                .iter()
                .filter(|r| !r.passed())
                .map(|r| r.name.as_str())
                .collect();
            if !failed.is_empty() {
                return Err(CliError::Numeric(format!(
                    "oracle checks failed: {}",
                    failed.join(", ")
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct DatagenSummary {
    pub manifest: PathBuf,
    pub hash: String,
    pub samples: usize,
}

pub fn datagen(run: &RunConfig, dir: &Path) -> CliResult<DatagenSummary> {
    let _lock = OutputLock::acquire(dir)?;
    let samples = generate_dataset(
        &TEMPLATES,
        run.data.n_samples,
        run.data.train_len,
        run.data.fps,
        run.seed,
    )?;
    let manifest = write_corpus(dir, &samples)?;
    fs::write(dir.join(CORPUS_CONFIG_FILE), run.to_toml_string())?;
    Ok(DatagenSummary {
        manifest,
        hash: corpus_hash(dir)?,
        samples: samples.len(),
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub manifest: CheckpointManifest,
}

/// Trains to `run.train.epochs` completed epochs, saving after every epoch.
pub fn train(run: &RunConfig, dir: &Path, resume: bool, log: &mut dyn Write) -> CliResult<TrainOutcome> {
    let _lock = OutputLock::acquire(dir)?;
    let corpus = read_corpus(&run.paths.corpus).map_err(|e| match e {
        dymamba::Error::Io(io) => CliError::Io(format!("corpus {}: {io}", run.paths.corpus.display())),
        other => other.into(),
    })?;
    let data_hash = corpus_hash(&run.paths.corpus)?;

    let (mut trainer, stats, mut losses) = if resume {
        let ck = checkpoint::load(dir)?;
        check_resumable(&ck.manifest, run, &data_hash)?;
        let stats = ck.manifest.pose_stats.clone();
        let losses = ck.manifest.losses.clone();
        let mut trainer = ck.into_trainer()?;
        trainer.config = run.train.clone();
        (trainer, stats, losses)
    } else {
        let stats = PoseStats::fit(&corpus.samples)?;
        let params = DenoiserParams::init(run.denoiser_config(), run.seed)?;
        let trainer = Trainer::new(params, run.schedule()?, run.train.clone(), run.seed)?;
        (trainer, stats, Vec::new())
    };
    let examples = training_examples(&corpus.samples, &stats, &run.encoder())?;
    writeln!(
        log,
        "training {} parameters on {} samples from epoch {}",
        trainer.params.num_params(),
        examples.len(),
        trainer.epoch
    )?;

    let mut manifest = None;
    while trainer.epoch < run.train.epochs {
        let epoch = trainer.train_epoch(&examples)?;
        if !epoch.mean_loss.is_finite() {
            return Err(CliError::Numeric(format!("loss diverged at epoch {}", epoch.epoch)));
        }
        losses.push(epoch.mean_loss);
        writeln!(
            log,
            "epoch {}/{} loss {:.6} lr {:.3e}",
            epoch.epoch, run.train.epochs, epoch.mean_loss, epoch.lr
        )?;
        manifest = Some(checkpoint::save(dir, &trainer, run, &stats, &data_hash, &losses)?);
    }
    let manifest = match manifest {
        Some(m) => m,
        None => checkpoint::save(dir, &trainer, run, &stats, &data_hash, &losses)?,
    };
    Ok(TrainOutcome {
        dir: dir.to_path_buf(),
        manifest,
    })
}

fn check_resumable(saved: &CheckpointManifest, run: &RunConfig, data_hash: &str) -> CliResult<()> {
    if saved.data_hash != data_hash {
        return Err(CliError::Config(format!(
            "corpus hash {data_hash} differs from the checkpoint's {}",
            saved.data_hash
        )));
    }
    if saved.run.denoiser_config() != run.denoiser_config() || saved.run.seed != run.seed {
        return Err(CliError::Config(
            "model config or seed differs from the checkpoint".into(),
        ));
    }
    if saved.run.diffusion.steps != run.diffusion.steps {
        return Err(CliError::Config("diffusion steps differ from the checkpoint".into()));
    }
    Ok(())
}

/// The checkpoint's run config with the sampling-time flags applied.
fn sampling_run(saved: &RunConfig, overrides: &Overrides) -> CliResult<RunConfig> {
    let mut run = saved.clone();
    if let Some(seed) = overrides.seed {
        run.seed = seed;
    }
    if let Some(d) = overrides.ddim_steps {
        run.diffusion.ddim_steps = d;
    }
    if let Some(w) = overrides.guidance_w {
        run.diffusion.guidance_w = w;
    }
    run.validate()?;
    Ok(run)
}

fn load_checkpoint(dir: &Path) -> CliResult<Checkpoint> {
    checkpoint::load(dir).map_err(|e| match e {
        dymamba::Error::Io(io) => CliError::Io(format!("checkpoint {}: {io}", dir.display())),
        other => other.into(),
    })
}

pub fn sample(
    ck_dir: &Path,
    overrides: &Overrides,
    prompt: &str,
    frames: Option<usize>,
    out: &Path,
) -> CliResult<PathBuf> {
    let ck = load_checkpoint(ck_dir)?;
    let saved = &ck.manifest.run;
    let run = sampling_run(saved, overrides)?;
    let schedule = run.schedule()?;
    let generator = Generator {
        model: &ck.params,
        stats: &ck.manifest.pose_stats,
        schedule: &schedule,
        // The text encoder belongs to the trained model, not to the sampling seed.
        encoder: saved.encoder(),
        ddim_steps: run.diffusion.ddim_steps,
        guidance_w: run.diffusion.guidance_w,
        fps: run.data.fps,
    };
    let text = generator.embed(prompt);
    if text.is_none() {
        log::warn!("empty prompt: sampling with the null condition");
    }
    let frames = frames.unwrap_or(run.data.train_len);
    let id = out.file_stem().and_then(|s| s.to_str()).unwrap_or("sample").to_string();
    let _lock = OutputLock::acquire(out)?;
    let seed = rng::substream_seed(run.seed, "sample");
    let mut motion = generator.sample(text.as_ref(), frames, seed, &id)?;
    if text.is_some() {
        motion.texts = vec![prompt.to_string()];
    }
    write_motion(out, &motion)?;
    Ok(out.to_path_buf())
}

pub fn eval(
    ck_dir: &Path,
    corpus_dir: &Path,
    overrides: &Overrides,
    multipliers: Option<Vec<usize>>,
    out: &Path,
) -> CliResult<EvalReport> {
    let ck = load_checkpoint(ck_dir)?;
    let saved = &ck.manifest.run;
    let mut run = sampling_run(saved, overrides)?;
    if let Some(m) = multipliers {
        run.eval.multipliers = m;
        run.validate()?;
    }
    let corpus = read_corpus(corpus_dir)?;
    let schedule = run.schedule()?;
    let generator = Generator {
        model: &ck.params,
        stats: &ck.manifest.pose_stats,
        schedule: &schedule,
        encoder: saved.encoder(),
        ddim_steps: run.diffusion.ddim_steps,
        guidance_w: run.diffusion.guidance_w,
        fps: run.data.fps,
    };
    let _lock = OutputLock::acquire(out)?;
    let report = evaluate(&generator, &corpus.samples, run.data.train_len, &run.eval, run.seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, report.to_text())?;
    fs::write(out.with_extension("csv"), report.to_csv())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cond_mode: CondMode,
    pub cross_mode: CrossMode,
    pub params: usize,
    pub epochs: usize,
    /// Mean training loss of the last epoch.
    pub final_loss: f64,
    /// Loss on the whole corpus under noise draws shared by every cell.
    pub eval_loss: f64,
}

pub fn cell_name(cond: CondMode, cross: CrossMode) -> String {
    format!("{}-{}", cond.as_str(), cross.as_str())
}

/// One row per conditioning × cross-mode cell, all trained with the same seed and corpus.
pub fn ablate(run: &RunConfig, dir: &Path, reuse: bool, log: &mut dyn Write) -> CliResult<Vec<AblationRow>> {
    let _lock = OutputLock::acquire(dir)?;
    let corpus = read_corpus(&run.paths.corpus)?;
    let eval_seed = rng::substream_seed(run.seed, "ablate.eval");
    let mut rows = Vec::new();
    for cond in CondMode::ALL {
        for cross in CrossMode::ALL {
            let mut cell = run.clone();
            cell.model.cond_mode = cond;
            cell.model.cross_mode = cross;
            let cell_dir = dir.join(cell_name(cond, cross));
            cell.paths.checkpoint = cell_dir.clone();
            if !reuse {
                writeln!(log, "cell {}", cell_name(cond, cross))?;
                train(&cell, &cell_dir, false, log)?;
            }
            let ck = checkpoint::load(&cell_dir).map_err(|e| match e {
                dymamba::Error::Io(_) => CliError::Io(format!("missing checkpoint for cell {}", cell_dir.display())),
                other => other.into(),
            })?;
            let examples = training_examples(&corpus.samples, &ck.manifest.pose_stats, &ck.manifest.run.encoder())?;
            let final_loss = ck.manifest.losses.last().copied().unwrap_or(f64::NAN);
            let (params, epochs) = (ck.manifest.param_count, ck.manifest.epoch);
            let trainer = ck.into_trainer()?;
            rows.push(AblationRow {
                cond_mode: cond,
                cross_mode: cross,
                params,
                epochs,
                final_loss,
                eval_loss: trainer.evaluate(&examples, eval_seed)?,
            });
        }
    }
    fs::write(dir.join(ABLATION_TABLE), ablation_table(&rows))?;
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("cond_mode\tcross_mode\tparams\tepochs\tfinal_loss\teval_loss\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\n",
            r.cond_mode.as_str(),
            r.cross_mode.as_str(),
            r.params,
            r.epochs,
            r.final_loss,
            r.eval_loss
        ));
    }
    s
}

pub fn grad_check(seeds: &[u64]) -> CliResult<Vec<OracleResult>> {
    let mut results = grad_suite(seeds)?;
    results.extend(scan_suite(seeds)?);
    Ok(results)
}

/// Parses arguments, runs the command and maps failures to exit codes.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    use clap::Parser;
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { crate::error::EXIT_CONFIG } else { 0 };
            let _ = if e.use_stderr() {
                write!(err, "{e}")
            } else {
                write!(out, "{e}")
            };
            return code;
        }
    };
    match run(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
