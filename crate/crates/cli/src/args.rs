use std::path::PathBuf;

use advmetric_core::attack::NormKind;
use advmetric_core::baseline::Method;
use advmetric_core::metrics::Objective;
use advmetric_core::restore::StopMode;
use clap::{ArgGroup, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(
    name = "advmetric",
    version,
    about = "Adversarial experiments on differentiable image quality metrics"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct Common {
    /// Output directory (created if missing) [default: out]
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Single source of randomness for the run
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for dataset-level parallelism
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Fusion model file; the built-in default model otherwise
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Also emit SVG plots next to the CSVs
    #[arg(long, global = true)]
    pub svg: bool,
}

impl Common {
    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[derive(Subcommand, Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum Command {
    /// Features, fused score and PSNR of one pair
    Score(ScoreArgs),
    /// Norm-bounded PGD attack on one image or a dataset
    Attack(AttackArgs),
    /// Recover a reference by maximizing a metric
    Restore(RestoreArgs),
    /// Radially averaged power spectrum
    Spectrum(SpectrumArgs),
    /// Perturbation magnitude against reference brightness
    Curve(CurveArgs),
    /// Mean attack gain over a list of radii, with a power-law fit
    Sweep(SweepArgs),
    /// Classical enhancement filters over a parameter grid
    Baseline(BaselineArgs),
    /// Analytic gradients against finite differences on natural-crop pairs
    Gradcheck(GradcheckArgs),
    /// Write seeded synthetic natural scenes as PGM
    Synth(SynthArgs),
    /// Re-execute the run recorded in a manifest
    Rerun(RerunArgs),
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct ScoreArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub dist: PathBuf,
}

/// One image or a directory of images.
#[derive(Args, Clone, Debug, Serialize, Deserialize)]
#[command(group(ArgGroup::new("source").required(true).args(["reference", "dataset"])))]
pub struct Source {
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// File-name glob inside --dataset
    #[arg(long, default_value = "*.p[gp]m")]
    pub pattern: String,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct PgdKnobs {
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    /// Let R + delta leave [0, 255]
    #[arg(long)]
    pub no_box: bool,
    /// Start from a random point of the ball instead of zero
    #[arg(long)]
    pub random_start: bool,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
#[command(group(ArgGroup::new("radius").required(true).args(["epsilon", "target_psnr"])))]
pub struct AttackArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long, default_value_t = NormKind::Linf)]
    pub norm: NormKind,
    #[arg(long, allow_negative_numbers = true)]
    pub epsilon: Option<f64>,
    /// L2 ball sized so that PSNR(R, R + delta) >= this
    #[arg(long)]
    pub target_psnr: Option<f64>,
    #[command(flatten)]
    pub pgd: PgdKnobs,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct RestoreArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long, default_value_t = Objective::Fused)]
    pub target: Objective,
    /// `noise`, `proxy` (blur + quantize the reference) or an image path
    #[arg(long, default_value = "noise")]
    pub init: String,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value = "threshold")]
    pub stop_mode: StopMode,
    /// Defaults to the target's conventional value
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value_t = 1e-4)]
    pub conv_tol: f64,
    #[arg(long, default_value_t = 50)]
    pub conv_window: usize,
    #[arg(long, default_value_t = 5000)]
    pub max_steps: usize,
    #[arg(long, default_value_t = 1.5)]
    pub proxy_sigma: f64,
    #[arg(long, default_value_t = 16)]
    pub proxy_levels: u32,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct SpectrumArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long, default_value_t = 100)]
    pub patches: usize,
    #[arg(long, default_value_t = 128)]
    pub patch: usize,
    /// Slope fit band in radial bins; defaults to 2..N/4
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    pub band: Option<Vec<usize>>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
#[command(group(ArgGroup::new("perturbation").required(true).args(["dist", "target_psnr"])))]
pub struct CurveArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Perturbed image; delta = dist - ref
    #[arg(long)]
    pub dist: Option<PathBuf>,
    /// Generate delta with an L2 attack at this PSNR bound instead
    #[arg(long)]
    pub target_psnr: Option<f64>,
    /// Edge mask threshold in image standard deviations
    #[arg(long, default_value_t = 1.0)]
    pub edge_k: f64,
    /// Use every interior pixel
    #[arg(long)]
    pub no_mask: bool,
    #[command(flatten)]
    pub pgd: PgdKnobs,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long, default_value_t = NormKind::Linf)]
    pub norm: NormKind,
    #[arg(long, value_delimiter = ',', required = true)]
    pub eps: Vec<f64>,
    #[command(flatten)]
    pub pgd: PgdKnobs,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long)]
    pub method: Method,
    #[arg(long, value_delimiter = ',', required = true)]
    pub grid: Vec<f64>,
    /// Flag rows whose mean PSNR falls outside [LO, HI]
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    pub psnr_window: Option<Vec<f64>>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 5)]
    pub pairs: usize,
    /// Nominal crop side; raised where a metric needs more
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, value_delimiter = ',', default_value = "vif0,vif1,vif2,vif3,adm,fused")]
    pub metrics: Vec<Objective>,
    #[arg(long, default_value_t = advmetric_core::metrics::gradcheck::GRADCHECK_STEP)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 5)]
    pub count: usize,
    #[arg(long, default_value_t = 352)]
    pub width: usize,
    #[arg(long, default_value_t = 288)]
    pub height: usize,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct RerunArgs {
    pub manifest: PathBuf,
}
