use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tldr_cli::commands::{self, CommandError};
use tldr_cli::service;

#[derive(Parser)]
#[command(name = "tldr", version, about = "Token-level hallucination reward models on a symbolic scene world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled corpus.
    Synth(commands::SynthArgs),
    /// Train a checkpoint.
    Train(commands::TrainArgs),
    /// Token, sentence and response accuracy plus mAP on a corpus split.
    Eval(commands::EvalArgs),
    /// Hallucination rates of captions decoded by a checkpoint.
    Hallucinate(commands::HallucinateArgs),
    /// Toy-VQA accuracy of merged checkpoints over a τ grid.
    SweepTau(commands::SweepTauArgs),
    /// Self-correct flagged captions with and without token-level guidance.
    Correct(commands::CorrectArgs),
    /// Run the annotation service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Data directory; defaults to $TLDR_DATA_DIR.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
}

fn serve(args: ServeArgs) -> Result<(), CommandError> {
    let dir = match args.data.or_else(|| std::env::var_os(service::DATA_DIR_ENV).map(PathBuf::from)) {
        Some(d) => d,
        None => return Err(CommandError::Usage("no data directory: pass --data or set TLDR_DATA_DIR".into())),
    };
    let paths = service::DataPaths::in_dir(&dir);
    commands::require(&paths.corpus)?;
    commands::require(&paths.checkpoint)?;
    let state = service::AppState::open(&paths)?;
    let addr: SocketAddr = format!("{}:{}", args.host, args.port).parse().map_err(|e| CommandError::Usage(format!("bad address: {e}")))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CommandError::Failed(e.into()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on http://{addr}");
        axum::serve(listener, service::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })
    .map_err(|e| CommandError::Failed(e.into()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Hallucinate(a) => commands::hallucinate(a),
        Command::SweepTau(a) => commands::sweep_tau(a),
        Command::Correct(a) => commands::correct(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
