use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dymamba::denoiser::{CondMode, CrossMode, ModelPreset};
use dymamba::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "dymamba", version, about = "Text-conditioned two-person motion diffusion")]
pub struct Cli {
    /// TOML run configuration; flags and environment variables override it.
    #[arg(long, global = true, env = "DYMAMBA_CONFIG")]
    pub config: Option<PathBuf>,

    #[command(flatten)]
    pub overrides: Overrides,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dyadic corpus.
    Datagen {
        /// Corpus directory (defaults to paths.corpus).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a denoiser on a corpus and write a checkpoint.
    Train {
        /// Continue from the checkpoint at paths.checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Sample one dyadic motion from a checkpoint.
    Sample {
        #[arg(long, env = "DYMAMBA_PROMPT", default_value = "")]
        prompt: String,
        /// Length in frames (defaults to the training length).
        #[arg(long)]
        frames: Option<usize>,
        /// Output `.dym` file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Long-horizon NDMS benchmark and distribution metrics.
    Eval {
        /// Horizons as multiples of the training length.
        #[arg(long, value_delimiter = ',')]
        multipliers: Option<Vec<usize>>,
        /// Report file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train or load every conditioning × cross-mode cell and tabulate final losses.
    Ablate {
        /// Directory holding one checkpoint per cell plus the table.
        #[arg(long)]
        out: PathBuf,
        /// Load existing cell checkpoints instead of training them.
        #[arg(long)]
        reuse: bool,
    },
    /// Run the gradient and scan oracle suites and print the worst errors.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

/// Flags mirroring [`RunConfig`] keys. Unset flags leave the loaded config untouched.
#[derive(Debug, Default, Clone, Args)]
pub struct Overrides {
    #[arg(long, global = true, env = "DYMAMBA_SEED")]
    pub seed: Option<u64>,
    #[arg(long, global = true, env = "DYMAMBA_PRESET")]
    pub preset: Option<ModelPreset>,
    #[arg(long, global = true, env = "DYMAMBA_N_BLOCKS")]
    pub n_blocks: Option<usize>,
    #[arg(long, global = true, env = "DYMAMBA_LATENT_DIM")]
    pub latent_dim: Option<usize>,
    #[arg(long, global = true, env = "DYMAMBA_D_STATE")]
    pub d_state: Option<usize>,
    #[arg(long, global = true, env = "DYMAMBA_D_TEXT")]
    pub d_text: Option<usize>,
    #[arg(long, global = true, env = "DYMAMBA_COND_MODE")]
    pub cond_mode: Option<CondMode>,
    #[arg(long, global = true, env = "DYMAMBA_CROSS_MODE")]
    pub cross_mode: Option<CrossMode>,
    /// Training diffusion steps.
    #[arg(long = "steps", global = true, env = "DYMAMBA_STEPS")]
    pub steps: Option<usize>,
    #[arg(long, global = true, env = "DYMAMBA_DDIM_STEPS")]
    pub ddim_steps: Option<usize>,
    #[arg(long, global = true, env = "DYMAMBA_GUIDANCE_W")]
    pub guidance_w: Option<f64>,
    #[arg(long, global = true, env = "DYMAMBA_MASK_PROB")]
    pub mask_prob: Option<f64>,
    #[arg(long, global = true, env = "DYMAMBA_LR")]
    pub lr: Option<f64>,
    #[arg(long, global = true, env = "DYMAMBA_EPOCHS")]
    pub epochs: Option<usize>,
    #[arg(long, global = true, env = "DYMAMBA_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    #[arg(long, global = true, env = "DYMAMBA_LAMBDA_VEL")]
    pub lambda_vel: Option<f64>,
    #[arg(long, global = true, env = "DYMAMBA_LAMBDA_REL")]
    pub lambda_rel: Option<f64>,
    #[arg(long, global = true, env = "DYMAMBA_N_SAMPLES")]
    pub n_samples: Option<usize>,
    #[arg(long, global = true, env = "DYMAMBA_TRAIN_LEN")]
    pub train_len: Option<usize>,
    #[arg(long, global = true, env = "DYMAMBA_FPS")]
    pub fps: Option<u32>,
    #[arg(long, global = true, env = "DYMAMBA_CORPUS")]
    pub corpus: Option<PathBuf>,
    #[arg(long, global = true, env = "DYMAMBA_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, c: &mut RunConfig) {
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        set(&mut c.seed, &self.seed);
        set(&mut c.model.preset, &self.preset);
        if self.n_blocks.is_some() {
            c.model.n_blocks = self.n_blocks;
        }
        if self.latent_dim.is_some() {
            c.model.latent_dim = self.latent_dim;
        }
        set(&mut c.model.d_state, &self.d_state);
        set(&mut c.model.d_text, &self.d_text);
        set(&mut c.model.cond_mode, &self.cond_mode);
        set(&mut c.model.cross_mode, &self.cross_mode);
        set(&mut c.diffusion.steps, &self.steps);
        set(&mut c.diffusion.ddim_steps, &self.ddim_steps);
        set(&mut c.diffusion.guidance_w, &self.guidance_w);
        set(&mut c.train.mask_prob, &self.mask_prob);
        set(&mut c.train.lr, &self.lr);
        set(&mut c.train.epochs, &self.epochs);
        set(&mut c.train.batch_size, &self.batch_size);
        set(&mut c.train.weights.lambda_vel, &self.lambda_vel);
        set(&mut c.train.weights.lambda_rel, &self.lambda_rel);
        set(&mut c.data.n_samples, &self.n_samples);
        set(&mut c.data.train_len, &self.train_len);
        set(&mut c.data.fps, &self.fps);
        set(&mut c.paths.corpus, &self.corpus);
        set(&mut c.paths.checkpoint, &self.checkpoint);
    }
}
