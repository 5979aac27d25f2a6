use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use homeshield::harness::{
    cmd_attack, cmd_evaluate, cmd_generate, cmd_shape, read_ground_truth, read_trace, write_report,
    AttackOverrides, HarnessError, LoadedSpec,
};
use homeshield::{Direction, Discipline, ShapingConfig};

#[derive(Parser)]
#[command(
    name = "homeshield",
    version,
    about = "Smart-home traffic-rate attack and shaping defense"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write one trace per roster device plus ground_truth.json.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Identify devices and infer activities from trace files.
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        attack: AttackFlags,
        /// Ground truth written by `generate`; its trace files are attacked and scored.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Trace files to attack when no ground truth is given.
        traces: Vec<PathBuf>,
    },
    /// Shape one direction of a trace and report overhead.
    Shape {
        #[command(flatten)]
        shaping: ShapeFlags,
        /// Input trace; omitted means no device traffic (pure cover).
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Horizon in seconds; defaults to the trace span.
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long, value_enum, default_value_t = DirArg::Up)]
        direction: DirArg,
        /// Skip writing schedule.csv.
        #[arg(long)]
        no_csv: bool,
    },
    /// Run the raw, tunneled and shaped comparison and write report.json.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        attack: AttackFlags,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment spec (TOML); defaults to the packaged six-device home.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Master seed; defaults to the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct AttackFlags {
    #[arg(long)]
    sample_seconds: Option<u32>,
    #[arg(long)]
    window_seconds: Option<u32>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Args)]
struct ShapeFlags {
    /// Bytes per second.
    #[arg(long, default_value_t = 512)]
    rate: u64,
    #[arg(long, default_value_t = 512)]
    cell_size: u32,
    #[arg(long, value_enum, default_value_t = DisciplineArg::Cit)]
    discipline: DisciplineArg,
    /// Mean VIT interval, seconds.
    #[arg(long, default_value_t = 1.0)]
    vit_mean: f64,
    /// VIT interval standard deviation, seconds.
    #[arg(long, default_value_t = 0.010)]
    vit_stddev: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum DisciplineArg {
    Cit,
    Vit,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirArg {
    Up,
    Down,
}

impl AttackFlags {
    fn overrides(&self) -> AttackOverrides {
        AttackOverrides {
            sample_seconds: self.sample_seconds,
            window_seconds: self.window_seconds,
            k: self.k,
            folds: self.folds,
        }
    }
}

impl Common {
    fn load(&self) -> Result<(LoadedSpec, u64), HarnessError> {
        let spec = match &self.spec {
            Some(p) => LoadedSpec::load(p)?,
            None => LoadedSpec::packaged_default(),
        };
        let seed = self.seed.unwrap_or(spec.spec.seed);
        Ok((spec, seed))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, HarnessError> {
    let ctx = |source| HarnessError::Io {
        context: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(ctx)?;
    }
    File::create(path).map(BufWriter::new).map_err(ctx)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let mut stdout = io::stdout().lock();
    match cli.command {
        Command::Generate { common } => {
            let (spec, seed) = common.load()?;
            let truth = cmd_generate(&spec, seed, &common.out)?;
            for d in &truth.devices {
                let _ = writeln!(stdout, "{}", common.out.join(&d.trace_file).display());
            }
            let _ = writeln!(stdout, "{}", common.out.join("ground_truth.json").display());
        }
        Command::Attack {
            common,
            attack,
            truth,
            traces,
        } => {
            let (spec, seed) = common.load()?;
            let spec = spec.with_overrides(&attack.overrides())?;
            let gt = truth.as_deref().map(read_ground_truth).transpose()?;
            let dir = truth
                .as_deref()
                .and_then(Path::parent)
                .unwrap_or(Path::new("."))
                .to_path_buf();
            let (report, jsonl) = cmd_attack(
                &spec,
                seed,
                &traces,
                gt.as_ref().map(|g| (g, dir.as_path())),
            )?;
            let path = write_report(&report, &common.out, "attack_report.json")?;
            let mut w = create(&common.out.join("activities.jsonl"))?;
            w.write_all(jsonl.as_bytes())
                .and_then(|_| w.flush())
                .map_err(|source| HarnessError::Io {
                    context: "activities.jsonl".into(),
                    source,
                })?;
            for e in &report.outcome.endpoints {
                let _ = writeln!(
                    stdout,
                    "{}\t{}\t{} activities",
                    e.endpoint,
                    e.identified_as.as_deref().unwrap_or("unidentified"),
                    e.activities
                );
            }
            let _ = writeln!(stdout, "{}", path.display());
        }
        Command::Shape {
            shaping,
            trace,
            seed,
            out,
            horizon,
            direction,
            no_csv,
        } => {
            let packets = match &trace {
                Some(p) => read_trace(p)?,
                None => Vec::new(),
            };
            let horizon_us = match horizon {
                Some(h) if h.is_finite() && h > 0.0 => (h * 1e6).round() as u64,
                Some(h) => return Err(HarnessError::Usage(format!("invalid horizon {h}"))),
                None => match packets.last() {
                    Some(p) => p.timestamp_us,
                    None => {
                        return Err(HarnessError::Usage(
                            "--horizon is required without --trace".into(),
                        ))
                    }
                },
            };
            let cfg = ShapingConfig {
                cell_size: shaping.cell_size,
                rate: shaping.rate,
                discipline: match shaping.discipline {
                    DisciplineArg::Cit => Discipline::Cit,
                    DisciplineArg::Vit => Discipline::Vit,
                },
                vit_mean: shaping.vit_mean,
                vit_stddev: shaping.vit_stddev,
                seed,
                direction: match direction {
                    DirArg::Up => Direction::Upload,
                    DirArg::Down => Direction::Download,
                },
            };
            let report = if no_csv {
                cmd_shape::<io::Sink>(&packets, &cfg, horizon_us, None)?
            } else {
                let csv_path = out.join("schedule.csv");
                let mut w = create(&csv_path)?;
                let r = cmd_shape(&packets, &cfg, horizon_us, Some(&mut w))?;
                w.flush().map_err(|source| HarnessError::Io {
                    context: csv_path.display().to_string(),
                    source,
                })?;
                r
            };
            let path = write_report(&report, &out, "overhead.json")?;
            let _ = writeln!(
                stdout,
                "overhead {:.1} B/s, {:.2} GB/month",
                report.overhead_rate, report.gb_per_month
            );
            let _ = writeln!(stdout, "{}", path.display());
        }
        Command::Evaluate { common, attack } => {
            let (spec, seed) = common.load()?;
            let spec = spec.with_overrides(&attack.overrides())?;
            let report = cmd_evaluate(&spec, seed)?;
            let path = write_report(&report, &common.out, "report.json")?;
            for (name, c) in &report.conditions {
                let acc = c
                    .attack
                    .classifier_accuracy
                    .map_or("-".to_string(), |a| format!("{a:.3}"));
                let _ = writeln!(
                    stdout,
                    "{name}\taccuracy {acc}\tevents {}/{}",
                    c.attack.events.recovered, c.attack.events.planted
                );
            }
            let _ = writeln!(stdout, "{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("homeshield: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
