use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use stereo_sdr::camera::View;

mod commands;
mod config;

#[derive(Parser)]
#[command(name = "stereo-sdr", version, about = "Stereo silhouette-based robot localisation toolkit")]
struct Cli {
    /// Run without the thread pool.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ViewArg {
    Left,
    Right,
}

#[derive(Subcommand)]
enum Command {
    /// Refine the robot-base pose against the scene's masks.
    Localize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also write observed and fitted masks as PNG.
        #[arg(long)]
        write_masks: bool,
    },
    /// Camera swarm initialisation only.
    InitSwarm {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Alternate segmentation with the rendered prior and refinement.
    Icp {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        write_masks: bool,
    },
    /// Monte-Carlo cross-validation on a synthetic scene.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        protocol: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// External baseline summary CSV (method,fit_size,median_mm,q1_mm,q3_mm); repeatable.
        #[arg(long)]
        baseline: Vec<PathBuf>,
    },
    /// Simulated drilling with breathing compensation.
    Breathe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Copy-move-merge augmentation batch.
    Cmm {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Render one silhouette to PNG.
    Render {
        /// `identity`, `default` (benchmark placement) or a TOML file with a 4x4 `matrix`.
        #[arg(long, default_value = "default")]
        pose: String,
        #[arg(long)]
        robot: Option<PathBuf>,
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Comma-separated joint values; zeros by default.
        #[arg(long)]
        q: Option<String>,
        #[arg(long, value_enum, default_value = "left")]
        view: ViewArg,
        /// Edge width in pixels; 0 renders a hard mask.
        #[arg(long, default_value_t = 0.0)]
        softness: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Triangulate stereo pixel pairs (CSV: u_left,v_left,u_right,v_right).
    Triangulate {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> stereo_sdr::Result<serde_json::Value> {
    if cli.sequential {
        stereo_sdr::par::set_sequential(true);
    }
    match cli.command {
        Command::Localize { config, out, write_masks } => commands::localize(&config, &out, write_masks),
        Command::InitSwarm { config, out } => commands::init_swarm(&config, &out),
        Command::Icp { config, out, write_masks } => commands::icp(&config, &out, write_masks),
        Command::Bench {
            config,
            protocol,
            out,
            baseline,
        } => commands::bench(&config, &protocol, &out, &baseline),
        Command::Breathe { config, out } => commands::breathe(&config, &out),
        Command::Cmm { config, out } => commands::cmm(&config, &out),
        Command::Render {
            pose,
            robot,
            calibration,
            q,
            view,
            softness,
            out,
        } => commands::render(&commands::RenderArgs {
            robot: robot.as_deref(),
            calibration: calibration.as_deref(),
            pose: &pose,
            q: q.as_deref(),
            view: match view {
                ViewArg::Left => View::Left,
                ViewArg::Right => View::Right,
            },
            softness,
            out: &out,
        }),
        Command::Triangulate { points, calibration, out } => commands::triangulate(&points, calibration.as_deref(), &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand | ErrorKind::MissingSubcommand => {
                    let _ = e.print();
                    ExitCode::from(2)
                }
                _ => {
                    let msg = json!({ "error": { "kind": "usage", "message": e.to_string().trim() } });
                    eprintln!("{msg}");
                    ExitCode::from(2)
                }
            };
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            ExitCode::from(1)
        }
    }
}
