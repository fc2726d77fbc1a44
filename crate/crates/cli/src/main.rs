use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cinevol_cli::{
    cmd_phantom, cmd_preset, cmd_render, cmd_sweep, load_scene_arg, with_threads, CliError,
    Overrides, Size, SweepAxis,
};

#[derive(Parser)]
#[command(
    name = "cinevol",
    version,
    about = "Cinematic volume rendering of CT data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RenderFlags {
    /// Scene file, or `preset:NAME` for a built-in scene (default: preset:default).
    #[arg(long)]
    scene: Option<String>,
    #[arg(long)]
    iterations: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Image size as WxH.
    #[arg(long)]
    size: Option<Size>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    no_ssao: bool,
    /// Also write the HDR image as PFM.
    #[arg(long)]
    hdr: bool,
}

impl RenderFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            iterations: self.iterations,
            seed: self.seed,
            size: self.size,
            no_ssao: self.no_ssao,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a scene to a PNG (and PFM with --hdr).
    Render {
        #[command(flatten)]
        flags: RenderFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one image per parameter value, a comparison grid and stats.csv.
    Sweep {
        #[command(flatten)]
        flags: RenderFlags,
        /// roughness, metallic, specular, light_count, light_layout or background_mode.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write an N³ phantom volume as NRRD.
    Phantom {
        kind: String,
        size: usize,
        out: PathBuf,
    },
    /// Write a transfer function preset (.tfcsv) or a scene preset (.scene.json).
    Preset { name: String, out: PathBuf },
    /// Run the render service.
    Serve {
        #[arg(long, env = "PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "THREADS")]
        threads: Option<usize>,
        #[arg(long, env = "SCENE")]
        scene: Option<String>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Render { flags, out } => {
            let (mut scene, base) = load_scene_arg(flags.scene.as_deref())?;
            flags.overrides().apply(&mut scene);
            scene.validate()?;
            with_threads(flags.threads, || {
                cmd_render(&scene, &base, &out, flags.hdr, &mut std::io::stdout())
            })??;
        }
        Command::Sweep {
            flags,
            axis,
            values,
            out,
        } => {
            let (mut scene, base) = load_scene_arg(flags.scene.as_deref())?;
            flags.overrides().apply(&mut scene);
            scene.validate()?;
            with_threads(flags.threads, || {
                cmd_sweep(
                    &scene,
                    &base,
                    axis,
                    &values,
                    &out,
                    flags.hdr,
                    &mut std::io::stdout(),
                )
            })??;
        }
        Command::Phantom { kind, size, out } => {
            cmd_phantom(&kind, size, &out)?;
        }
        Command::Preset { name, out } => cmd_preset(&name, &out)?,
        Command::Serve {
            port,
            threads,
            scene,
        } => {
            let (scene, base_dir) = load_scene_arg(scene.as_deref())?;
            let config = cinevol_service::Config {
                port,
                threads,
                scene,
                base_dir,
            };
            cinevol_service::run(config).map_err(CliError::Core)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
