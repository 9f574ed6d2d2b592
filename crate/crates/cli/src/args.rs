use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "kmpadapt", version, about = "Learn KMP skills from demonstrations and adapt them with language")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a model from a directory of CSV demonstrations.
    Learn(LearnArgs),
    /// Apply one instruction to a model.
    Adapt(AdaptArgs),
    /// Score an instruction corpus.
    Eval(EvalArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
    /// Write the synthetic bearing-ring demonstrations and environment.
    Fixture(FixtureArgs),
}

#[derive(Debug, Clone, Args)]
pub struct LearnOptions {
    /// Mixture components K.
    #[arg(long, default_value_t = 12)]
    pub components: usize,
    /// Reference distribution size N.
    #[arg(long, default_value_t = 500)]
    pub grid: usize,
    /// Points each demonstration is resampled onto, H.
    #[arg(long, default_value_t = 500)]
    pub horizon: usize,
    /// Seed for mixture initialization.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct LearnArgs {
    /// Directory holding `*.csv` files with header `t,x,y,z`.
    #[arg(long)]
    pub demos: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub learn: LearnOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LlmKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value_t = LlmKind::Mock)]
    pub llm: LlmKind,
    /// Rule file for the mock backend; the bundled rules are used otherwise.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Chat-completions base URL (the API key is read from KMPADAPT_API_KEY).
    #[arg(long, default_value = "http://127.0.0.1:8000/v1")]
    pub base_url: String,
    #[arg(long, default_value = "default")]
    pub model_name: String,
    /// Request timeout in seconds.
    #[arg(long, default_value_t = 120.0)]
    pub timeout: f64,
    /// Session and tool settings as JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub env: PathBuf,
    #[arg(long)]
    pub instruction: String,
    /// Adapted model.
    #[arg(long)]
    pub out: PathBuf,
    /// Trace file; defaults to `<out>.trace.json`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Plot data; defaults to `<out>.plot.json`.
    #[arg(long)]
    pub plot: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Environment for cases and corpora that name none.
    #[arg(long)]
    pub env: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    /// Directory for `report.json` and `report.txt`.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub env: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    /// Output directory; receives `demos/` and `bearing_ring_env.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub demos: usize,
    /// Seed for the demonstration generator.
    #[arg(long, default_value_t = 7)]
    pub fixture_seed: u64,
    /// Also write the learned model here.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub learn: LearnOptions,
}
