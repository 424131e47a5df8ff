use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Train and analyze invertible interpretation networks.
///
/// Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
/// failure. Set IIN_LOG to quiet, info or debug to control stderr logging.
#[derive(Debug, Parser)]
#[command(name = "iin", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on concept pairs with the pair loss.
    Train(TrainArgs),
    /// Train on plain latents with the marginal likelihood.
    TrainUnsup(TrainArgs),
    /// Score concepts from pair files and allocate factor dimensions.
    EstimateDims(EstimateArgs),
    /// Replace one factor of source latents with that of donor latents.
    Swap(SwapArgs),
    /// Interpolate linearly in code space between two sets of latents.
    Interp(InterpArgs),
    /// Compute a code-space attribute vector and optionally apply it.
    AttrVec(AttrVecArgs),
    /// Draw latents by inverting standard-normal codes.
    Sample(SampleArgs),
    /// Walk one factor with an Ornstein-Uhlenbeck process and record a head's response.
    Respond(RespondArgs),
    /// Check pair-loss gradients against central differences on a random network.
    Gradcheck(GradcheckArgs),
    /// Measure the inversion error of a checkpoint on random latents.
    Roundtrip(RoundtripArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration file (key = value).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `steps` in the config.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Overrides `seed` in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// One pair file per concept.
    #[arg(long, num_args = 1.., required = true)]
    pub pairs: Vec<PathBuf>,
    /// Total dimension to allocate; defaults to the latent dimension.
    #[arg(long)]
    pub total: Option<usize>,
    /// Pairs read per batch.
    #[arg(long, default_value_t = 1024)]
    pub batch: usize,
    /// Also write dims.csv here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SwapArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Source latents (headerless CSV).
    #[arg(long)]
    pub src: PathBuf,
    /// Donor latents, row-aligned with the source.
    #[arg(long)]
    pub donor: PathBuf,
    /// Factor index to swap (0 is the residual).
    #[arg(long)]
    pub factor: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InterpArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Start latents (headerless CSV).
    #[arg(long)]
    pub from: PathBuf,
    /// End latents, row-aligned with the start.
    #[arg(long)]
    pub to: PathBuf,
    /// Points per path including both ends.
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttrVecArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Latents that have the attribute.
    #[arg(long)]
    pub with: PathBuf,
    /// Latents that lack the attribute.
    #[arg(long)]
    pub without: PathBuf,
    /// Restrict the vector to one factor.
    #[arg(long)]
    pub factor: Option<usize>,
    /// Latents to edit with the vector.
    #[arg(long)]
    pub apply: Option<PathBuf>,
    /// Step size along the vector.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RespondArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Run configuration describing the synthetic world (source = world).
    #[arg(long)]
    pub config: PathBuf,
    /// Network factor to perturb.
    #[arg(long)]
    pub factor: usize,
    /// Ground-truth factor read by the head.
    #[arg(long, default_value_t = 1)]
    pub head_factor: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub head_seed: u64,
    #[arg(long, default_value_t = iin::analysis::DEFAULT_OU_GAMMA)]
    pub gamma: f64,
    /// Noise scale; only with --literal.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Use the sign-flipping recurrence z ← −γz + σW.
    #[arg(long)]
    pub literal: bool,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    /// Number of starting latents drawn from the world.
    #[arg(long, default_value_t = 1)]
    pub starts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Latent dimension (even).
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-6)]
    pub h: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Also write gradcheck.csv here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RoundtripArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest accepted absolute error.
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
}
