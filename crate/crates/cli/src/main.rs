mod args;
mod config;
mod run;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{CommandFactory, FromArgMatches};

use args::{Cli, Command};

fn summary(status: &str, out_dir: Option<&Path>, started: Instant) {
    let line = serde_json::json!({
        "status": status,
        "out_dir": out_dir.map(|p| p.display().to_string()),
        "wall_ms": started.elapsed().as_millis() as u64,
    });
    println!("{line}");
}

fn out_dir(command: &Command) -> Option<PathBuf> {
    Some(
        match command {
            Command::Am(a) => &a.out,
            Command::Data(_) => return None,
            Command::Train(a) => &a.out,
            Command::Exp1(a) => &a.eval.out,
            Command::Exp2(a) => &a.eval.out,
            Command::Exp3(a) => &a.out,
            Command::Sweep(a) => &a.out,
            Command::DualityVerify(a) => &a.out,
            Command::LaplaceCheck(a) => &a.out,
            Command::PosteriorCheck(a) => &a.out,
        }
        .clone(),
    )
}

fn execute(cli: &Cli, echo: &str) -> anyhow::Result<Option<PathBuf>> {
    let out = out_dir(&cli.command);
    let dir = out.as_deref().unwrap_or(Path::new("."));
    match &cli.command {
        Command::Am(a) => {
            run::am(a, dir)?;
            run::write(dir, "config.echo", echo)?;
        }
        Command::Data(d) => {
            return match &d.command {
                Some(cmd) => run::data(cmd).map(Some),
                None => {
                    let name = d.fraction_schedule.as_deref().unwrap_or("default");
                    print!("{}", run::fraction_schedule(name, d.truncate)?.to_csv());
                    Ok(None)
                }
            };
        }
        Command::Train(a) => run::train(a, dir, echo)?,
        Command::Exp1(a) => run::exp1(a, dir, echo)?,
        Command::Exp2(a) => run::exp2(a, dir, echo)?,
        Command::Exp3(a) => run::exp3(a, dir, echo)?,
        Command::Sweep(a) => run::sweep(a, cli.workers, dir, echo)?,
        Command::DualityVerify(a) => run::duality(a, dir, echo)?,
        Command::LaplaceCheck(a) => run::laplace(a, dir, echo)?,
        Command::PosteriorCheck(a) => run::posterior(a, dir, echo)?,
    }
    Ok(out)
}

fn main() -> ExitCode {
    let started = Instant::now();
    let argv: Vec<OsString> = std::env::args_os().collect();
    let mut cmd = Cli::command();
    let first = cmd.clone().try_get_matches_from(&argv).unwrap_or_else(|e| e.exit());
    let path = config::leaf_path(&first);
    if let Some(file) = first.get_one::<PathBuf>("config") {
        let entries = match config::read_config(file) {
            Ok(e) => e,
            Err(e @ config::ConfigError::Read { .. }) => {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
            Err(e) => cmd.error(ErrorKind::InvalidValue, e).exit(),
        };
        cmd = match config::apply_defaults(cmd.clone(), &path, &entries, &file.display().to_string()) {
            Ok(c) => c,
            Err(e) => cmd.error(ErrorKind::UnknownArgument, e).exit(),
        };
    }
    let matches = cmd.clone().try_get_matches_from(&argv).unwrap_or_else(|e| e.exit());
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    if let Command::Data(d) = &cli.command {
        if d.command.is_none() && d.fraction_schedule.is_none() {
            cmd.error(ErrorKind::MissingSubcommand, "data needs a generator subcommand or --fraction-schedule").exit();
        }
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global() {
        eprintln!("warning: could not size the thread pool: {e}");
    }
    let echo = config::echo(&cmd, &matches, &path);
    match execute(&cli, &echo) {
        Ok(Some(out)) => {
            summary("ok", Some(&out), started);
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            summary("error", out_dir(&cli.command).as_deref(), started);
            ExitCode::from(1)
        }
    }
}
