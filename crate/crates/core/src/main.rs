use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use integrator_lab::experiments::{list_scenarios, load_configs, run_suite, selftest_configs, RunReport};
use integrator_lab::Result;

#[derive(Parser)]
#[command(name = "integrator-lab", version, about = "Run local-time and Gram determinant experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override `master_seed` of every experiment.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for CSV and sidecar files.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiments in a config file.
    Run {
        #[arg(required_unless_present = "config_flag", conflicts_with = "config_flag")]
        config: Option<PathBuf>,
        #[arg(long = "config", value_name = "CONFIG")]
        config_flag: Option<PathBuf>,
    },
    /// List scenario names.
    List,
    /// Run every scenario with its default settings.
    Selftest,
}

fn report(reports: &[RunReport]) -> bool {
    let mut ok = true;
    for rep in reports {
        for row in &rep.rows {
            println!(
                "{} {} {} [{}] estimate={} se={} oracle={}",
                if row.pass { "PASS" } else { "FAIL" },
                row.scenario,
                row.anchor,
                row.parameters,
                row.estimate,
                row.std_error,
                row.oracle.map_or_else(|| "-".to_string(), |o| o.to_string()),
            );
        }
        println!(
            "{}: {} rows, {} failed, {:.1}s -> {}",
            rep.scenario,
            rep.rows.len(),
            rep.rows.iter().filter(|r| !r.pass).count(),
            rep.wall_time,
            rep.csv_path.display()
        );
        ok &= rep.passed();
    }
    ok
}

fn execute(cli: &Cli) -> Result<bool> {
    let mut configs = match &cli.command {
        Command::List => {
            for (name, description) in list_scenarios() {
                println!("{name:<12} {description}");
            }
            return Ok(true);
        }
        Command::Run { config, config_flag } => {
            let path = config.as_ref().or(config_flag.as_ref()).expect("clap requires a config");
            load_configs(path)?
        }
        Command::Selftest => selftest_configs(cli.seed.unwrap_or(0)),
    };
    if let Some(seed) = cli.seed {
        for c in &mut configs {
            c.master_seed = seed;
        }
    }
    let reports = run_suite(&configs, &cli.out)?;
    Ok(report(&reports))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| execute(&cli)),
            Err(e) => {
                eprintln!("error: thread pool: {e}");
                return ExitCode::from(2);
            }
        },
        None => execute(&cli),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
