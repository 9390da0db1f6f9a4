use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sadm_cli::commands::{self, Axis, PartitionArgs, Setting};
use sadm_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "sadm", version, about = "Sequence-aware diffusion for longitudinal volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic subjects as LVS files plus a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `seed` from the configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `data.subjects`.
        #[arg(long)]
        subjects: Option<usize>,
    },
    /// Train a model into a run directory.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// A gen-data directory; without it, subjects are generated from the configuration.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Complete a partially observed sequence.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        setting: Option<Setting>,
        #[arg(long, value_delimiter = ',')]
        cond: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        missing: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        future: Option<Vec<usize>>,
        /// Number of final frames to predict in the full setting.
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Defaults to the config.echo of the checkpoint's run directory.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to RUN/samples/<input>-<setting>.lvs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score generated frames against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Write the per-frame CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one slice of one frame as a plain PGM image.
    Render {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long, default_value = "z")]
        axis: Axis,
        #[arg(long)]
        slice: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenData { out, config, seed, subjects } => {
            let mut cfg = commands::load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = subjects {
                cfg.data.subjects = n;
            }
            cfg.validate().map_err(CliError::Usage)?;
            commands::gen_data(&cfg, &out)
        }
        Command::Train { out, config, data } => {
            let cfg = commands::load_config(config.as_deref())?;
            commands::train_run(&cfg, &out, data.as_deref())
        }
        Command::Sample { ckpt, input, setting, cond, missing, future, k, config, out } => {
            let config = config.unwrap_or_else(|| commands::config_for_checkpoint(&ckpt));
            if !config.exists() {
                return Err(CliError::Usage(format!(
                    "no configuration at {}; pass --config",
                    config.display()
                )));
            }
            let cfg = commands::load_config(Some(&config))?;
            let volume = sadm_core::datagen::read_lvs(&input)?;
            let args = PartitionArgs { cond, missing, future, k };
            let p = commands::resolve_partition(setting, &args, volume.len())?;
            let result = commands::sample_sequence(&cfg, &ckpt, &volume, &p)?;
            let out = match out {
                Some(o) => o,
                None => {
                    let dir = commands::run_dir_of(&ckpt).join("samples");
                    std::fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
                    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("sample");
                    let tag = match setting {
                        Some(Setting::Single) => "single",
                        Some(Setting::Full) => "full",
                        _ => "missing",
                    };
                    dir.join(format!("{stem}-{tag}.lvs"))
                }
            };
            sadm_core::datagen::write_lvs(&result, &out)?;
            println!("{}", out.display());
            Ok(())
        }
        Command::Eval { pred, truth, out } => {
            print!("{}", commands::eval_files(&pred, &truth, out.as_deref())?);
            Ok(())
        }
        Command::Render { input, frame, axis, slice, out } => commands::render_file(&input, frame, axis, slice, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sadm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
