use std::path::PathBuf;
use std::process::ExitCode;

use repflow_cli::{commands, CliError};

const USAGE: &str = "\
repflow — representation-flow toolkit

USAGE:
  repflow flow   --config FILE --out DIR FRAME.pgm FRAME.pgm [FRAME.pgm ...]
  repflow bench  --config FILE
  repflow train  --config FILE --out DIR
  repflow eval   --config FILE --checkpoint FILE [--split train|test]
  repflow ablate --config FILE

Subcommands:
  flow    Estimate flow between consecutive PGM frames; writes flow_%04d.flo
          (plus .ppm visualisations with `flow.write_ppm = true`).
  bench   Time the flow-layer forward over a (resolution, channels,
          iterations) grid; CSV on stdout.
  train   Train one stage on the synthetic motion dataset; writes
          metrics.csv and checkpoint.rfk into the output directory.
  eval    Evaluate a checkpoint on a dataset split; CSV on stdout.
  ablate  Sweep flow-layer count {0,1,2,3} or iterations {10,20,30,50};
          CSV on stdout.

Configuration files are UTF-8 `key = value` lines with `#` comments.
The environment variable REPFLOW_SEED overrides the `seed` key.

Exit codes: 0 success, 1 usage/config error, 2 I/O error, 3 numeric failure.
";

struct Parsed {
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    split: Option<String>,
    positional: Vec<PathBuf>,
}

fn parse_flags(args: &[String]) -> Result<Parsed, CliError> {
    let mut parsed = Parsed {
        config: None,
        out: None,
        checkpoint: None,
        split: None,
        positional: Vec::new(),
    };
    let mut i = 0;
    while i < args.len() {
        let arg = args[i].clone();
        let take_value = |i: &mut usize| -> Result<String, CliError> {
            *i += 1;
            args.get(*i)
                .cloned()
                .ok_or_else(|| CliError::Usage(format!("{arg} needs a value")))
        };
        match args[i].as_str() {
            "--config" => parsed.config = Some(PathBuf::from(take_value(&mut i)?)),
            "--out" => parsed.out = Some(PathBuf::from(take_value(&mut i)?)),
            "--checkpoint" => parsed.checkpoint = Some(PathBuf::from(take_value(&mut i)?)),
            "--split" => parsed.split = Some(take_value(&mut i)?),
            flag if flag.starts_with("--") => {
                return Err(CliError::Usage(format!("unknown flag {flag}")))
            }
            other => parsed.positional.push(PathBuf::from(other)),
        }
        i += 1;
    }
    Ok(parsed)
}

fn require<T>(value: Option<T>, what: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("missing {what}")))
}

fn run() -> Result<(), CliError> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(sub) = args.first() else {
        return Err(CliError::Usage(USAGE.into()));
    };
    let rest = &args[1..];
    match sub.as_str() {
        "flow" => {
            let p = parse_flags(rest)?;
            let config = require(p.config, "--config FILE")?;
            let out = require(p.out, "--out DIR")?;
            commands::cmd_flow(&config, &out, &p.positional)
        }
        "bench" => {
            let p = parse_flags(rest)?;
            let config = require(p.config, "--config FILE")?;
            commands::cmd_bench(&config, &mut std::io::stdout())
        }
        "train" => {
            let p = parse_flags(rest)?;
            let config = require(p.config, "--config FILE")?;
            let out = require(p.out, "--out DIR")?;
            commands::cmd_train(&config, &out)
        }
        "eval" => {
            let p = parse_flags(rest)?;
            let config = require(p.config, "--config FILE")?;
            let checkpoint = require(p.checkpoint, "--checkpoint FILE")?;
            let split = p.split.unwrap_or_else(|| "test".into());
            commands::cmd_eval(&config, &checkpoint, &split, &mut std::io::stdout())
        }
        "ablate" => {
            let p = parse_flags(rest)?;
            let config = require(p.config, "--config FILE")?;
            commands::cmd_ablate(&config, &mut std::io::stdout())
        }
        "help" | "--help" | "-h" => {
            println!("{USAGE}");
            Ok(())
        }
        other => Err(CliError::Usage(format!(
            "unknown subcommand {other:?}\n\n{USAGE}"
        ))),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
