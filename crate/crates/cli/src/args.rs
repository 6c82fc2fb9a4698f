use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "mpatch", version, about = "Patch a toy image-text encoder by weight interpolation and align a multi-spectral student to it")]
pub struct Cli {
    /// Output directory. Every relative path resolves against it.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,

    /// Experiment config as JSON.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Built-in config to start from when no file is given.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,

    /// Re-seed every stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Override one config field, e.g. `--set finetune.epochs=4`. Values are JSON.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,

    /// Report path; defaults to `reports/<command>.json`. Plots go next to it.
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Default,
    Small,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainArg {
    Natural,
    Satellite,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossArg {
    MseCe,
    Ce,
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BandsArg {
    All,
    Rgb,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate the synthetic natural and satellite datasets.
    GenData(GenData),
    /// Contrastive pretraining of the image/text pair on natural data.
    Pretrain(Pretrain),
    /// Build a frozen classification head from class prompts.
    BuildHead(BuildHead),
    /// Fine-tune the image encoder through a frozen head.
    Finetune(Finetune),
    /// Interpolate zero-shot and fine-tuned weights at one alpha.
    Patch(Patch),
    /// Score every alpha of the grid, pick one, and plot the trade-off.
    Sweep(Sweep),
    /// Align a multi-spectral student to a patched teacher.
    Align(Align),
    /// Zero-shot score of an image or student encoder through a head.
    EvalZeroshot(EvalZeroshot),
    /// RGB<->MS recall@k between teacher and student embeddings.
    EvalRetrieval(EvalRetrieval),
    /// Linear probe on frozen embeddings.
    EvalProbe(EvalProbe),
    /// Cosine similarity between two encoders' embeddings of the same data.
    EvalSimstats(EvalSimstats),
    /// Every stage end to end.
    Pipeline(Pipeline),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Pretrain(_) => "pretrain",
            Command::BuildHead(_) => "build-head",
            Command::Finetune(_) => "finetune",
            Command::Patch(_) => "patch",
            Command::Sweep(_) => "sweep",
            Command::Align(_) => "align",
            Command::EvalZeroshot(_) => "eval-zeroshot",
            Command::EvalRetrieval(_) => "eval-retrieval",
            Command::EvalProbe(_) => "eval-probe",
            Command::EvalSimstats(_) => "eval-simstats",
            Command::Pipeline(_) => "pipeline",
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct GenData {
    #[arg(long, value_enum, default_value = "both")]
    pub domain: DomainArg,
}

#[derive(Args, Debug, Serialize)]
pub struct Pretrain {
    #[arg(long, default_value = "data/natural")]
    pub data: PathBuf,
    #[arg(long, default_value = "ckpt/zeroshot_image.mpc")]
    pub image_out: PathBuf,
    #[arg(long, default_value = "ckpt/text.mpc")]
    pub text_out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct BuildHead {
    #[arg(long, value_enum)]
    pub domain: DomainArg,
    #[arg(long, default_value = "ckpt/text.mpc")]
    pub text: PathBuf,
    /// Image checkpoint whose stored logit scale the head uses.
    #[arg(long, default_value = "ckpt/zeroshot_image.mpc")]
    pub image: PathBuf,
    /// Prompt set JSON; defaults to the domain's built-in templates.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Defaults to `heads/<domain>.mpc`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct Finetune {
    #[arg(long, default_value = "ckpt/zeroshot_image.mpc")]
    pub image: PathBuf,
    #[arg(long, default_value = "heads/satellite.mpc")]
    pub head: PathBuf,
    #[arg(long, default_value = "data/satellite")]
    pub data: PathBuf,
    #[arg(long, default_value = "ckpt/finetuned_image.mpc")]
    pub output: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct Patch {
    /// Mixing coefficient; defaults to the alpha chosen by the last sweep.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value = "ckpt/zeroshot_image.mpc")]
    pub zeroshot: PathBuf,
    #[arg(long, default_value = "ckpt/finetuned_image.mpc")]
    pub finetuned: PathBuf,
    #[arg(long, default_value = "reports/sweep.json")]
    pub sweep: PathBuf,
    #[arg(long, default_value = "ckpt/patched_image.mpc")]
    pub output: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct Sweep {
    #[arg(long, default_value = "ckpt/zeroshot_image.mpc")]
    pub zeroshot: PathBuf,
    #[arg(long, default_value = "ckpt/finetuned_image.mpc")]
    pub finetuned: PathBuf,
    #[arg(long, default_value = "heads/natural.mpc")]
    pub supported_head: PathBuf,
    #[arg(long, default_value = "heads/satellite.mpc")]
    pub patching_head: PathBuf,
    #[arg(long, default_value = "data/natural")]
    pub supported_data: PathBuf,
    #[arg(long, default_value = "data/satellite")]
    pub patching_data: PathBuf,
    /// Comma-separated alphas; defaults to the config grid.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
}

#[derive(Args, Debug, Serialize)]
pub struct Align {
    #[arg(long, default_value = "ckpt/patched_image.mpc")]
    pub teacher: PathBuf,
    #[arg(long, default_value = "heads/satellite.mpc")]
    pub head: PathBuf,
    #[arg(long, default_value = "data/satellite")]
    pub data: PathBuf,
    /// Accept a teacher that was never patched.
    #[arg(long)]
    pub allow_unpatched: bool,
    #[arg(long, value_enum, default_value = "mse-ce")]
    pub loss: LossArg,
    #[arg(long, value_enum, default_value = "all")]
    pub bands: BandsArg,
    #[arg(long, default_value = "ckpt/student.mpc")]
    pub output: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalZeroshot {
    /// Image or student checkpoint.
    #[arg(long, default_value = "ckpt/student.mpc")]
    pub encoder: PathBuf,
    #[arg(long, default_value = "heads/satellite.mpc")]
    pub head: PathBuf,
    #[arg(long, default_value = "data/satellite")]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalRetrieval {
    #[arg(long, default_value = "ckpt/patched_image.mpc")]
    pub teacher: PathBuf,
    #[arg(long, default_value = "ckpt/student.mpc")]
    pub student: PathBuf,
    #[arg(long, default_value = "data/satellite")]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalProbe {
    #[arg(long, default_value = "ckpt/student.mpc")]
    pub encoder: PathBuf,
    #[arg(long, default_value = "data/satellite")]
    pub data: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalSimstats {
    #[arg(long, default_value = "ckpt/zeroshot_image.mpc")]
    pub a: PathBuf,
    #[arg(long, default_value = "ckpt/patched_image.mpc")]
    pub b: PathBuf,
    /// Datasets to embed; one distribution each.
    #[arg(long, default_values = ["data/natural", "data/satellite"])]
    pub data: Vec<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Args, Debug, Serialize)]
pub struct Pipeline {}
