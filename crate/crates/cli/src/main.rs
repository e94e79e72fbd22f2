use clap::{Parser, Subcommand};
use musemask_cli::config::{EditRequest, RunConfig};
use musemask_cli::{commands, exit_code};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "musemask")]
#[command(about = "Two-stage text-driven semantic-map and image editing pipeline")]
struct Args {
    /// JSON run configuration (defaults apply to missing fields).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Single-thread exact-replay mode.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Artifact directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,

    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Cmd>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus (scenes, maps, renders, manifest).
    GenData,
    /// Phase 0: train the autoencoder on full maps.
    TrainAe,
    /// Phase 1: train the mask-aware skip modules (encoder/decoder frozen).
    TrainSkip,
    /// Train the stage-1 mask denoiser on leave-one-out pairs.
    TrainMaskdiff,
    /// conv_in-only fine-tune on insertion pairs (eyeglasses, hat).
    FinetuneInsert,
    /// Train the stage-2 inpainting base on rendered images.
    TrainBase,
    /// Train the zero-convolution control branch (base frozen).
    TrainControl,
    /// Run a full edit request: new map, then edited image.
    Edit {
        /// JSON edit request.
        #[arg(long)]
        request: PathBuf,
        /// Output name stem (defaults to the request file stem).
        #[arg(long)]
        name: Option<String>,
    },
    /// Evaluate all held-out metrics and write report.json.
    Eval,
    /// Generate a row of masks for one task across seeds.
    SampleGrid {
        /// JSON stage-1 task file.
        #[arg(long)]
        request: PathBuf,
        #[arg(long, default_value_t = 8)]
        seeds: usize,
    },
}

fn load_config(args: &Args) -> Result<RunConfig, musemask_core::error::Error> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.deterministic {
        cfg.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: &Args) -> Result<(), musemask_core::error::Error> {
    let cfg = load_config(args)?;
    if args.print_config {
        println!("{}", cfg.to_json_pretty());
        return Ok(());
    }
    let out = &args.out;
    match args.command.as_ref() {
        None => {
            eprintln!("no subcommand given; see --help");
            Err(musemask_core::error::Error::Config("missing subcommand".into()))
        }
        Some(Cmd::GenData) => commands::cmd_gen_data(&cfg, out),
        Some(Cmd::TrainAe) => commands::cmd_train_ae(&cfg, out),
        Some(Cmd::TrainSkip) => commands::cmd_train_skip(&cfg, out),
        Some(Cmd::TrainMaskdiff) => commands::cmd_train_maskdiff(&cfg, out),
        Some(Cmd::FinetuneInsert) => commands::cmd_finetune_insert(&cfg, out),
        Some(Cmd::TrainBase) => commands::cmd_train_base(&cfg, out),
        Some(Cmd::TrainControl) => commands::cmd_train_control(&cfg, out),
        Some(Cmd::Edit { request, name }) => {
            let req = EditRequest::load(request)?;
            let stem = name.clone().unwrap_or_else(|| {
                request
                    .file_stem()
                    .map(|s| s.to_string_lossy().to_string())
                    .unwrap_or_else(|| "edit".to_string())
            });
            let outcome = commands::cmd_edit(&cfg, out, &req, &stem)?;
            println!(
                "wrote {} and {} (noop: {})",
                outcome.map_path.display(),
                outcome.image_path.display(),
                outcome.noop
            );
            Ok(())
        }
        Some(Cmd::Eval) => {
            let report = commands::cmd_eval(&cfg, out)?;
            println!("{}", report.to_json());
            Ok(())
        }
        Some(Cmd::SampleGrid { request, seeds }) => {
            commands::cmd_sample_grid(&cfg, out, request, *seeds)
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
