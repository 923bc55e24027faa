use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fluorotwin::contrast::{contrast_report, format_table, RoiSpec};
use fluorotwin::pipeline::{self, ClockMode, Control, RunError, RunOptions};
use fluorotwin::{pgm, Scenario};

const DEFAULT_BIND: &str = "127.0.0.1:7400";

#[derive(Parser)]
#[command(name = "fluorotwin", version, about = "Virtual-twin teleoperation workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario live.
    Run(RunArgs),
    /// Run a scenario and record its frames.
    Record(RunArgs),
    /// Feed recorded frames through detector and twin-sync.
    Replay(RunArgs),
    /// Live run printing the latency report.
    Bench(RunArgs),
    /// Solve the scenario's maze and drive it with the autopilot.
    Maze(RunArgs),
    /// Relative-contrast table for a PGM frame.
    Contrast(ContrastArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the scenario duration, seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Bus endpoint; the WebSocket bridge listens on the next port.
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long)]
    replay: Option<PathBuf>,
    /// No bus endpoint unless `--bind` is given.
    #[arg(long)]
    headless: bool,
    /// Simulated clock: deterministic and as fast as the machine allows.
    #[arg(long)]
    fast: bool,
    /// Directory for run logs and the calibration record.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ContrastArgs {
    frame: PathBuf,
    #[arg(long)]
    roi: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        Self {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

fn config_err(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load(a: &RunArgs) -> Result<Scenario, Failure> {
    let mut sc = Scenario::load(&a.scenario).map_err(|e| config_err(e.to_string()))?;
    if let Some(d) = a.duration {
        sc.set_duration(d).map_err(|e| config_err(e.to_string()))?;
    }
    if let Some(s) = a.seed {
        sc.set_seed(s);
    }
    Ok(sc)
}

fn options(a: &RunArgs, sc: &Scenario) -> RunOptions {
    let mut o = RunOptions::for_scenario(sc);
    o.clock = if a.fast {
        ClockMode::Lockstep
    } else {
        ClockMode::Realtime
    };
    o.bind = match (&a.bind, a.headless) {
        (Some(b), _) => Some(b.clone()),
        (None, true) => None,
        (None, false) => Some(DEFAULT_BIND.to_string()),
    };
    o.record_dir = a.record.clone();
    o.out_dir = Some(
        a.out
            .clone()
            .unwrap_or_else(|| Path::new("fluorotwin-runs").join(&sc.doc.name)),
    );
    o
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("report serializes"));
}

fn dispatch(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Run(a) => {
            let sc = load(&a)?;
            let opts = options(&a, &sc);
            let s = match &a.replay {
                Some(dir) => pipeline::replay(&sc, dir, opts.out_dir.as_deref())?,
                None => pipeline::run(&sc, &opts)?,
            };
            print_json(&s);
        }
        Cmd::Record(a) => {
            let sc = load(&a)?;
            let opts = options(&a, &sc);
            if opts.record_dir.is_none() {
                return Err(config_err("record needs --record <dir>"));
            }
            print_json(&pipeline::run(&sc, &opts)?);
        }
        Cmd::Replay(a) => {
            let sc = load(&a)?;
            let dir = a
                .replay
                .clone()
                .ok_or_else(|| config_err("replay needs --replay <dir>"))?;
            let opts = options(&a, &sc);
            print_json(&pipeline::replay(&sc, &dir, opts.out_dir.as_deref())?);
        }
        Cmd::Bench(a) => {
            let sc = load(&a)?;
            let mut opts = options(&a, &sc);
            if a.fast {
                return Err(config_err("bench measures wall-clock latency; drop --fast"));
            }
            opts.clock = ClockMode::Realtime;
            print_json(&pipeline::bench_latency(&sc, &opts)?);
        }
        Cmd::Maze(a) => {
            let sc = load(&a)?;
            let mut opts = options(&a, &sc);
            opts.control = Control::Autopilot;
            opts.stop_on_arrival = true;
            let s = pipeline::run(&sc, &opts)?;
            print_json(&s);
            let ap = s.autopilot.as_ref().expect("autopilot run");
            if ap.status != fluorotwin::control::AutopilotStatus::Arrived {
                return Err(Failure {
                    code: 3,
                    message: format!(
                        "controller stage failed: autopilot {:?} after {}/{} steps",
                        ap.status,
                        ap.reached,
                        ap.waypoints.len()
                    ),
                });
            }
        }
        Cmd::Contrast(a) => {
            let frame = pgm::read_file(&a.frame).map_err(|e| config_err(e.to_string()))?;
            let text = fs::read_to_string(&a.roi)
                .map_err(|e| config_err(format!("{}: {e}", a.roi.display())))?;
            let spec: RoiSpec = serde_json::from_str(&text)
                .map_err(|e| config_err(format!("{}: {e}", a.roi.display())))?;
            let rows = contrast_report(&frame, &spec).map_err(|e| Failure {
                code: 3,
                message: format!("contrast: {e}"),
            })?;
            if a.json {
                print_json(&rows);
            } else {
                print!("{}", format_table(&rows));
            }
        }
    }
    Ok(())
}
