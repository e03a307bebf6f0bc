use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use warpdiff_core::harness::{self, Command, Invocation};

#[derive(Parser)]
#[command(name = "warpdiff", version, about = "Try-on latent diffusion on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults to the run directory's resolved config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override such as `diffusion.window=4`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace existing artifacts.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic train and test splits.
    MakeData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the image autoencoder.
    TrainCodec {
        #[command(flatten)]
        common: Common,
    },
    /// Train the denoiser and automatic mask head.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Generate try-on images for the test split.
    Sample {
        #[command(flatten)]
        common: Common,
    },
    /// Score generated samples and write metrics.json.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Count attention multiply-accumulates over the benchmark grid.
    BenchAttn {
        #[command(flatten)]
        common: Common,
    },
    /// Write warped garment / target / predicted mask panels.
    VizMask {
        #[command(flatten)]
        common: Common,
    },
}

fn invocation(c: Common) -> Invocation {
    Invocation {
        config: c.config,
        overrides: c.overrides,
        out: c.out,
        force: c.force,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (command, inv) = match cli.command {
        Cmd::MakeData { common, count, seed } => {
            let mut inv = invocation(common);
            inv.overrides.extend(count.map(|n| format!("data.count={n}")));
            inv.overrides.extend(seed.map(|s| format!("data.seed={s}")));
            (Command::MakeData, inv)
        }
        Cmd::TrainCodec { common } => (Command::TrainCodec, invocation(common)),
        Cmd::Train { common } => (Command::Train, invocation(common)),
        Cmd::Sample { common } => (Command::Sample, invocation(common)),
        Cmd::Eval { common } => (Command::Eval, invocation(common)),
        Cmd::BenchAttn { common } => (Command::BenchAttn, invocation(common)),
        Cmd::VizMask { common } => (Command::VizMask, invocation(common)),
    };
    match harness::run(command, &inv).map_err(anyhow::Error::from) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.downcast_ref::<warpdiff_core::Error>().map_or(1, |e| e.exit_code());
            eprintln!("error: {e:#}");
            ExitCode::from(code as u8)
        }
    }
}
