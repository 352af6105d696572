use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lsk_cli::{cmd_analyze, cmd_convert, cmd_degrade, cmd_dump_features, cmd_eval, cmd_train, CliError, Config};

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override any configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Compare parameters and operation counts of model pairs.
    Analyze {
        /// Comma-separated (baseline, variant) pairs.
        #[arg(long)]
        models: Option<String>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        scale: Option<String>,
        /// Feature-map size, e.g. 512x512.
        #[arg(long)]
        resolution: Option<String>,
        /// Also write analysis.csv here.
        #[arg(long)]
        out_dir: Option<String>,
    },
    /// Build LR and bicubic images from a folder of HR PNGs.
    Degrade {
        #[arg(long)]
        hr_dir: Option<String>,
        #[arg(long)]
        scale: Option<String>,
        #[arg(long)]
        out_dir: Option<String>,
    },
    /// Train a model on a degraded dataset.
    Train {
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        train_dir: Option<String>,
        #[arg(long)]
        val_dir: Option<String>,
        #[arg(long)]
        out_dir: Option<String>,
        #[arg(long)]
        epochs: Option<String>,
        #[arg(long)]
        seed: Option<String>,
    },
    /// PSNR/SSIM of a checkpoint against the bicubic baseline.
    Eval {
        #[arg(long)]
        checkpoint: Option<String>,
        /// Degraded dataset directory.
        #[arg(long)]
        val_dir: Option<String>,
        #[arg(long)]
        out_dir: Option<String>,
    },
    /// Merge separable pairs or decompose square layers.
    Convert {
        #[arg(long)]
        checkpoint: Option<String>,
        /// merge | decompose
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        c_extra: Option<String>,
        #[arg(long)]
        output: Option<String>,
    },
    /// Save the feature maps of one conv stage as PNGs.
    DumpFeatures {
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        image: Option<String>,
        /// 1-based conv stage.
        #[arg(long)]
        layer: Option<String>,
        #[arg(long)]
        out_dir: Option<String>,
    },
}

impl Command {
    /// Flags as `(key, value)` config overrides.
    fn overrides(&self) -> Vec<(&'static str, Option<&String>)> {
        match self {
            Command::Analyze { models, preset, scale, resolution, out_dir } => vec![
                ("models", models.as_ref()),
                ("preset", preset.as_ref()),
                ("scale", scale.as_ref()),
                ("resolution", resolution.as_ref()),
                ("out_dir", out_dir.as_ref()),
            ],
            Command::Degrade { hr_dir, scale, out_dir } => {
                vec![("hr_dir", hr_dir.as_ref()), ("scale", scale.as_ref()), ("out_dir", out_dir.as_ref())]
            }
            Command::Train { model, preset, train_dir, val_dir, out_dir, epochs, seed } => vec![
                ("model", model.as_ref()),
                ("preset", preset.as_ref()),
                ("train_dir", train_dir.as_ref()),
                ("val_dir", val_dir.as_ref()),
                ("out_dir", out_dir.as_ref()),
                ("epochs", epochs.as_ref()),
                ("seed", seed.as_ref()),
            ],
            Command::Eval { checkpoint, val_dir, out_dir } => vec![
                ("checkpoint", checkpoint.as_ref()),
                ("val_dir", val_dir.as_ref()),
                ("out_dir", out_dir.as_ref()),
            ],
            Command::Convert { checkpoint, mode, c_extra, output } => vec![
                ("checkpoint", checkpoint.as_ref()),
                ("mode", mode.as_ref()),
                ("c_extra", c_extra.as_ref()),
                ("output", output.as_ref()),
            ],
            Command::DumpFeatures { checkpoint, image, layer, out_dir } => vec![
                ("checkpoint", checkpoint.as_ref()),
                ("image", image.as_ref()),
                ("layer", layer.as_ref()),
                ("out_dir", out_dir.as_ref()),
            ],
        }
    }
}

#[derive(Parser)]
#[command(name = "lsk", version, about = "Separable-kernel super-resolution toolkit")]
struct Root {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

fn run(root: Root) -> Result<(), CliError> {
    let mut cfg = match &root.common.config {
        Some(path) => Config::from_file(path)?,
        None => Config::default(),
    };
    for s in &root.common.sets {
        cfg.set(s)?;
    }
    for (key, value) in root.command.overrides() {
        if let Some(v) = value {
            cfg.set(&format!("{key}={v}"))?;
        }
    }
    let warn = |w: &[String]| w.iter().for_each(|m| eprintln!("warning: {m}"));
    match root.command {
        Command::Analyze { .. } => {
            let out = cmd_analyze(&cfg)?;
            warn(&out.warnings);
            print!("{}", out.table.to_text());
        }
        Command::Degrade { .. } => {
            let out = cmd_degrade(&cfg)?;
            println!("degraded {} image(s)", out.rows.len());
        }
        Command::Train { .. } => {
            let out = cmd_train(&cfg)?;
            warn(&out.warnings);
            print!("{}", out.text);
        }
        Command::Eval { .. } => print!("{}", cmd_eval(&cfg)?.table.to_text()),
        Command::Convert { .. } => {
            let out = cmd_convert(&cfg)?;
            warn(&out.warnings);
            print!("{}", out.text);
        }
        Command::DumpFeatures { .. } => {
            let out = cmd_dump_features(&cfg)?;
            println!("wrote {} map(s) and {}", out.maps.len(), out.montage.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let root = match Root::try_parse() {
        Ok(r) => r,
        Err(e) => {
            let code = if e.use_stderr() { lsk_cli::EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(root) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
