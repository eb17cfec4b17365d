use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use voxocc::config::{parse_scene_config, RunConfig};
use voxocc::losses::{class_frequencies, class_weights, DEFAULT_CLAMP_RATIO};
use voxocc::metrics::ReportFormat;
use voxocc::synth::{generate_dataset, Manifest};
use voxocc::train::{eval, train, LOG_HEADER};
use voxocc::verify::{run_gradcheck, GradcheckOptions, GRADCHECK_TOLERANCE};
use voxocc::voxel::LabelSpace;
use voxocc::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_VERIFY: u8 = 4;

#[derive(Parser)]
#[command(name = "voxocc", version, about = "Voxel occupancy heads: training, evaluation and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Kv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Space {
    Reduced,
    Nuscenes,
}

#[derive(Subcommand)]
enum Command {
    /// Train a head and write the checkpoint and log named in the config.
    Train {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the config's evaluation split.
    Eval {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the analytic gradients; every suite should then fail.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Per-class voxel counts and class weights of a dataset.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "reduced")]
        label_space: Space,
        #[arg(long, default_value_t = DEFAULT_CLAMP_RATIO)]
        clamp_ratio: f64,
        /// Also print a text histogram of the counts.
        #[arg(long)]
        histogram: bool,
    },
    /// Generate synthetic scenes from a `scene.*` config.
    GenData {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short = 'n', long)]
        n_scenes: usize,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let out = train(&cfg)?;
            println!("{LOG_HEADER}");
            if let Some(last) = out.log.last() {
                println!("{last}");
            }
            if let Some(p) = &cfg.output.checkpoint {
                eprintln!("wrote {} ({} steps)", p.display(), out.steps);
            }
        }
        Command::Eval {
            config,
            checkpoint,
            format,
        } => {
            let cfg = RunConfig::load(&config)?;
            let report = eval(&cfg, &checkpoint)?;
            let format = match format {
                Format::Table => ReportFormat::Table,
                Format::Kv => ReportFormat::KeyValue,
            };
            let text = report.render(cfg.data.label_space(), format);
            print!("{text}");
            if let Some(p) = &cfg.output.report {
                fs::write(p, &text).map_err(|e| voxocc_io(p, e))?;
            }
        }
        Command::Gradcheck { seed, inject_fault } => {
            let results = run_gradcheck(GradcheckOptions { seed, inject_fault });
            for r in &results {
                let verdict = if r.passed { "PASS" } else { "FAIL" };
                println!("{:<28} max_rel_err={:.3e} {verdict}", r.name, r.max_rel_error);
            }
            if results.iter().any(|r| !r.passed) {
                eprintln!("gradient check failed (tolerance {GRADCHECK_TOLERANCE:e})");
                return Ok(EXIT_VERIFY);
            }
        }
        Command::Stats {
            manifest,
            label_space,
            clamp_ratio,
            histogram,
        } => {
            let space = match label_space {
                Space::Reduced => LabelSpace::reduced(),
                Space::Nuscenes => LabelSpace::nuscenes(),
            };
            let scenes = Manifest::read(&manifest)?.load_all(&space)?;
            let stats = class_frequencies(scenes.iter().map(|(_, g)| g), &space)?;
            let weights = class_weights(&stats, Some(clamp_ratio))?;
            print!("{}", stats.table(&weights, &space));
            if histogram {
                println!();
                print!("{}", stats.histogram(&space, 50));
            }
        }
        Command::GenData { config, n_scenes, out } => {
            let text = fs::read_to_string(&config).map_err(|e| voxocc_io(&config, e))?;
            let scene = parse_scene_config(&text)?;
            let manifest = generate_dataset(&scene, n_scenes, &out)?;
            eprintln!("wrote {} scenes to {}", manifest.entries.len(), out.display());
        }
    }
    Ok(0)
}

fn voxocc_io(path: &std::path::Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
