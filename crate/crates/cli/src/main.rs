use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use resonance_core::scenario::{load_scenario, output_dir_for, run_study, ResultManifest, Scenario, Stages};

#[derive(Parser)]
#[command(name = "resonance", version, about = "EMT resonance screening studies for AC-HVDC networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory (overrides the scenario's `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for scans and sweeps.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Time step override for runs and scans (s).
    #[arg(long, global = true)]
    dt: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage of a study: time-domain run, scans, screens, analyses, sweep.
    Run { file: PathBuf },
    /// Run only the sensitivity sweep.
    Sweep { file: PathBuf },
    /// Run only the frequency scans and stability screens.
    Scan { file: PathBuf },
    /// Parse and validate a scenario without running it.
    Validate { file: PathBuf },
}

const EXIT_STAGE_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn load(file: &Path, dt: Option<f64>) -> Result<Scenario, String> {
    let mut s = load_scenario(file).map_err(|e| format!("{}: {e}", file.display()))?;
    if let Some(dt) = dt {
        s.override_dt(dt).map_err(|e| format!("--dt: {e}"))?;
    }
    Ok(s)
}

fn out_dir(cli_out: &Option<PathBuf>, file: &Path, s: &Scenario) -> PathBuf {
    if let Some(o) = cli_out {
        return o.clone();
    }
    output_dir_for(file, s).unwrap_or_else(|| {
        let stem = file.file_stem().and_then(|x| x.to_str()).unwrap_or("study");
        PathBuf::from("results").join(stem)
    })
}

fn report(m: &ResultManifest, out: &Path) -> ExitCode {
    for s in &m.stages {
        let status = if s.ok { "ok" } else { "FAILED" };
        match &s.error {
            Some(e) => println!("{:<28} {status:<7} {:>8.2} s  {e}", s.name, s.wall_clock_s),
            None => println!("{:<28} {status:<7} {:>8.2} s", s.name, s.wall_clock_s),
        }
    }
    println!("{} artifacts in {}", m.artifacts.len() + 1, out.display());
    if m.success() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_STAGE_FAILURE)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 || rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            eprintln!("error: invalid --threads {n}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    let (file, stages) = match &cli.command {
        Command::Run { file } => (file, Stages::ALL),
        Command::Sweep { file } => (file, Stages::SWEEP),
        Command::Scan { file } => (file, Stages::SCAN),
        Command::Validate { file } => (file, Stages::ALL),
    };
    let scenario = match load(file, cli.dt) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match &cli.command {
        Command::Validate { .. } => {
            println!("{}: valid", file.display());
            println!("name            {}", scenario.name);
            println!("scenario hash   {}", scenario.hash());
            println!("dt              {} s", scenario.dt_s);
            match scenario.duration_s {
                Some(d) => println!("run             {d} s, {} events", scenario.events.len()),
                None => println!("run             none"),
            }
            if let Some(scan) = &scenario.scan {
                println!(
                    "scan            {} at {} frequencies, dt {} s",
                    scan.points.join(", "),
                    scan.frequencies_hz.len(),
                    scan.dt_s
                );
            }
            if let Some(ax) = &scenario.sweep {
                println!(
                    "sweep           {} cells",
                    ax.cable_km.len() * ax.scc1_gva.len() * ax.points.len()
                );
            }
            return ExitCode::SUCCESS;
        }
        Command::Sweep { .. } if scenario.sweep.is_none() => {
            eprintln!("error: {} has no [sweep] section", file.display());
            return ExitCode::from(EXIT_CONFIG);
        }
        Command::Scan { .. } if scenario.scan.is_none() => {
            eprintln!("error: {} has no [scan] section", file.display());
            return ExitCode::from(EXIT_CONFIG);
        }
        _ => {}
    }
    let out = out_dir(&cli.out, file, &scenario);
    match run_study(&scenario, &out, stages) {
        Ok((manifest, output)) => {
            if let Some(t) = &output.sweep {
                print!("{}", t.to_text());
            }
            report(&manifest, &out)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_STAGE_FAILURE)
        }
    }
}
