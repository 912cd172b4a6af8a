use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

mod commands;
mod serve;

/// Cross-paced partial curriculum learning for sketch/image retrieval.
#[derive(Debug, Parser)]
#[command(name = "cppcl", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset with planted coupled dictionaries.
    GenSynth(GenSynthArgs),
    /// Build the joint graph Laplacian from features and groups.
    BuildLaplacian(BuildLaplacianArgs),
    /// Build a constraints file from easiness scores, sketch rasters or annotations.
    BuildCurriculum(BuildCurriculumArgs),
    /// Learn coupled dictionaries and write a checkpoint directory.
    Train(TrainArgs),
    /// Encode feature columns against a learned dictionary.
    Encode(EncodeArgs),
    /// Rank gallery codes for every query code.
    Retrieve(RetrieveArgs),
    /// Compute mAP, per-class AP, PR curves and recognition rate from results.
    Evaluate(EvaluateArgs),
    /// Serve sketch pairs for easiness annotation over HTTP.
    AnnotateServe(AnnotateServeArgs),
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    sketches: usize,
    #[arg(long, default_value_t = 200)]
    images: usize,
    #[arg(long, default_value_t = 20)]
    dim_sketch: usize,
    #[arg(long, default_value_t = 20)]
    dim_image: usize,
    /// Atoms of the planted dictionaries.
    #[arg(long, default_value_t = 30)]
    n_true: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 0.05)]
    noise_easy: f64,
    #[arg(long, default_value_t = 0.25)]
    noise_hard: f64,
    #[arg(long, default_value_t = 0.3)]
    hard_fraction: f64,
    /// Matched pairs in the held-out split (0 disables it).
    #[arg(long, default_value_t = 100)]
    test_pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct BuildLaplacianArgs {
    /// Sketch features (CPM1 or .csv).
    #[arg(long)]
    fs: PathBuf,
    /// Image features (CPM1 or .csv).
    #[arg(long)]
    fi: PathBuf,
    /// Groups file (`modality,index,group_id`).
    #[arg(long)]
    groups: PathBuf,
    /// Gaussian kernel width.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Output Laplacian matrix.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).multiple(true)
    .args(["sketch_scores", "pgm_dir", "image_scores", "annotations"])))]
struct BuildCurriculumArgs {
    /// Sketch easiness scores (`index,score`).
    #[arg(long, conflicts_with = "pgm_dir")]
    sketch_scores: Option<PathBuf>,
    /// Directory of PGM sketches, indexed in file-name order; scored by edgeness.
    #[arg(long)]
    pgm_dir: Option<PathBuf>,
    /// Treat dark pixels as strokes when reading PGM sketches.
    #[arg(long, requires = "pgm_dir")]
    invert: bool,
    /// Windows sampled per sketch for edgeness.
    #[arg(long, default_value_t = 100)]
    n_windows: usize,
    /// Write the computed edgeness scores here.
    #[arg(long, requires = "pgm_dir")]
    scores_out: Option<PathBuf>,
    /// Image easiness scores (`index,score`).
    #[arg(long)]
    image_scores: Option<PathBuf>,
    /// Annotation journal (JSON lines) from annotate-serve.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Sketch score gap threshold [default: 0.1 x score range].
    #[arg(long)]
    delta_sketch: Option<f64>,
    /// Image score gap threshold [default: 0.1 x score range].
    #[arg(long)]
    delta_image: Option<f64>,
    /// Fraction of sketch candidates kept.
    #[arg(long, default_value_t = 1.0)]
    rho_sketch: f64,
    /// Fraction of image candidates kept.
    #[arg(long, default_value_t = 1.0)]
    rho_image: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output constraints file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Cufs,
    Flickr15k,
    Queenmary,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    fs: PathBuf,
    #[arg(long)]
    fi: PathBuf,
    /// Joint Laplacian from build-laplacian.
    #[arg(long)]
    laplacian: PathBuf,
    /// Groups file; required by regularizer A.
    #[arg(long)]
    groups: Option<PathBuf>,
    /// Curriculum constraints file.
    #[arg(long)]
    constraints: Option<PathBuf>,
    /// `key = value` config file, applied before the preset and flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Hyperparameter bundle, applied before individual flags.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Initial pace; `--gamma0 0 --mu 0` runs the unpaced ablation.
    #[arg(long)]
    gamma0: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    /// Dictionary size.
    #[arg(long)]
    atoms: Option<usize>,
    /// Self-paced regularizer: a or b.
    #[arg(long)]
    regularizer: Option<String>,
    /// Laplacian coupling in the pacing QP: paper or exact.
    #[arg(long)]
    laplacian_form: Option<String>,
    /// Use the literal sign of regularizer B.
    #[arg(long)]
    literal_sp_b: bool,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    rel_tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    /// Dictionary matrix (e.g. a checkpoint's dict_sketch.cpm).
    #[arg(long)]
    dictionary: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Sparsity weight; use the training value.
    #[arg(long)]
    alpha: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RetrieveArgs {
    /// Query (sketch) codes.
    #[arg(long)]
    queries: PathBuf,
    /// Gallery (image) codes.
    #[arg(long)]
    gallery: PathBuf,
    /// Groups file: sketch rows label queries, image rows label the gallery.
    #[arg(long)]
    groups: PathBuf,
    /// Results per query [default: whole gallery].
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    results: PathBuf,
    /// Groups file, for per-class AP.
    #[arg(long)]
    groups: Option<PathBuf>,
    /// Ground-truth matches (`sketch_id,image_id`), for the recognition rate.
    #[arg(long)]
    matches: Option<PathBuf>,
    /// Directory for metrics.txt and PR curves.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct AnnotateServeArgs {
    /// Sketch features used to pair nearest neighbours.
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    groups: PathBuf,
    /// Sketch images, indexed in file-name order, served under /static/.
    #[arg(long)]
    images_dir: Option<PathBuf>,
    /// Answer journal (JSON lines); resumed when it exists.
    #[arg(long)]
    journal: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
