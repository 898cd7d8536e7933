mod args;
mod commands;
mod config;
mod error;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use commands::Ctx;
use config::FileConfig;
use error::CliError;
use manifest::{RunManifest, MANIFEST_FILE};

const OUT_ENV: &str = "GUIDECAP_OUT";

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth(_) => "synth",
        Command::Vocab(_) => "vocab",
        Command::Train(_) => "train",
        Command::Sweep(_) => "sweep",
        Command::Decode(_) => "decode",
        Command::Eval(_) => "eval",
        Command::Stats(_) => "stats",
        Command::Replay(_) => "replay",
    }
}

fn default_out(name: &str) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(root) => PathBuf::from(root).join(name),
        None => PathBuf::from("runs").join(name),
    }
}

fn execute(cli: Cli, argv: Vec<String>) -> Result<(), CliError> {
    let name = command_name(&cli.command);
    if let Command::Replay(r) = &cli.command {
        return replay(&r.manifest, cli.out);
    }
    let mut ctx = Ctx {
        file: FileConfig::load(cli.config.as_deref())?,
        out: cli.out.clone().unwrap_or_else(|| default_out(name)),
        force: cli.force,
        manifest: RunManifest::new(name, &argv),
    };
    if let Some(p) = &cli.config {
        ctx.manifest.input(p)?;
    }
    match &cli.command {
        Command::Synth(a) => commands::synth(&mut ctx, a)?,
        Command::Vocab(a) => commands::vocab(&mut ctx, a)?,
        Command::Train(a) => commands::train(&mut ctx, a)?,
        Command::Sweep(a) => commands::sweep_cmd(&mut ctx, a)?,
        Command::Decode(a) => commands::decode(&mut ctx, a)?,
        Command::Eval(a) => commands::eval(&mut ctx, a)?,
        Command::Stats(a) => commands::stats(&mut ctx, a)?,
        Command::Replay(_) => unreachable!("handled above"),
    }
    ctx.finish()
}

/// Re-runs a recorded command, overwriting its outputs (or writing to `out`).
fn replay(path: &std::path::Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let m = RunManifest::read(&path)?;
    let out = out.unwrap_or_else(|| path.parent().map(PathBuf::from).unwrap_or_default());
    let mut argv: Vec<String> = Vec::new();
    let mut skip = false;
    for a in &m.argv {
        if skip {
            skip = false;
        } else if a == "--out" {
            skip = true;
        } else if !a.starts_with("--out=") && a != "--force" {
            argv.push(a.clone());
        }
    }
    argv.extend(["--out".to_string(), out.display().to_string(), "--force".to_string()]);
    let cli = Cli::try_parse_from(std::iter::once("guidecap".to_string()).chain(argv.iter().cloned()))
        .map_err(|e| CliError::Usage(format!("manifest arguments do not parse: {e}")))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(CliError::Usage("a manifest cannot replay another replay".into()));
    }
    execute(cli, argv)
}

fn run(raw: Vec<OsString>) -> i32 {
    let cli = match Cli::try_parse_from(&raw) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = raw.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli, argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    std::process::exit(run(std::env::args_os().collect()));
}
