mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mofg_core::eval::JudgeKind;
use mofg_core::train::Stage;
use mofg_core::FusionStrategy;

#[derive(Parser, Debug)]
#[command(name = "mofg", version, about = "Mixture-of-features forensic question answering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Shrink datasets and epochs for a smoke run.
    #[arg(long)]
    pub quick: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct JudgeFlags {
    #[arg(long, value_parser = parse_judge)]
    pub judge: Option<JudgeKind>,
    /// Remote judge URL (implies `--judge remote` when no judge is given).
    #[arg(long)]
    pub endpoint: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write caption, train and test sets as JSONL.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of training examples (also used for the caption set).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Run the align stage, the ground stage, or both.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding the generated sets (defaults to the output directory).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = StageArg::Both)]
        stage: StageArg,
        #[arg(long, value_parser = parse_fusion)]
        fusion: Option<FusionStrategy>,
        /// Starting checkpoint for `--stage ground`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Answer every test question and score the answers.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Expected fusion strategy of the checkpoint.
        #[arg(long, value_parser = parse_fusion)]
        fusion: Option<FusionStrategy>,
        #[command(flatten)]
        judge: JudgeFlags,
        #[arg(long)]
        max_new: Option<usize>,
    },
    /// Answer one question about one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image file as written by `gen-data` (JSON with shape and base64 data).
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = mofg_core::data::IMAGE_QUESTION)]
        question: String,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
    },
    /// Run the fusion and adapter-schedule ablation grids.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Use previously generated sets instead of generating new ones.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        judge: JudgeFlags,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageArg {
    Align,
    Ground,
    Both,
}

impl StageArg {
    pub fn stages(self) -> &'static [Stage] {
        match self {
            StageArg::Align => &[Stage::Align],
            StageArg::Ground => &[Stage::Ground],
            StageArg::Both => &[Stage::Align, Stage::Ground],
        }
    }
}

fn parse_fusion(s: &str) -> Result<FusionStrategy, String> {
    s.parse().map_err(|e: mofg_core::Error| e.to_string())
}

fn parse_judge(s: &str) -> Result<JudgeKind, String> {
    match s {
        "keyword" => Ok(JudgeKind::Keyword),
        "remote" => Ok(JudgeKind::Remote),
        _ => Err(format!("unknown judge `{s}` (expected keyword or remote)")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MOF_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { common, n, n_test } => commands::gen_data(&common, n, n_test),
        Command::Train {
            common,
            data,
            stage,
            fusion,
            checkpoint,
        } => commands::train(&common, data, stage, fusion, checkpoint),
        Command::Eval {
            common,
            data,
            checkpoint,
            fusion,
            judge,
            max_new,
        } => commands::eval(&common, data, &checkpoint, fusion, &judge, max_new),
        Command::Infer {
            checkpoint,
            image,
            question,
            max_new,
        } => commands::infer(&checkpoint, &image, &question, max_new),
        Command::Ablate {
            common,
            data,
            judge,
        } => commands::ablate(&common, data, &judge),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code())
        }
    }
}
