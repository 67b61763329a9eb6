use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Arg, ArgAction, ArgMatches, Command};
use mfsvie_cli::config::Section;
use mfsvie_cli::{parse_config_for, recipes, run_experiment, ExperimentConfig};

fn common_args(cmd: Command) -> Command {
    cmd.arg(Arg::new("config").long("config").short('c').value_name("PATH").value_parser(clap::value_parser!(PathBuf)).help("config file"))
        .arg(Arg::new("seed").long("seed").value_name("SEED").help("override the seed"))
        .arg(Arg::new("out").long("out").short('o').value_name("DIR").help("override the output directory"))
        .arg(
            Arg::new("set")
                .long("set")
                .value_name("KEY=VALUE")
                .action(ArgAction::Append)
                .help("override any recipe parameter"),
        )
}

fn cli() -> Command {
    let mut cmd = Command::new("mfsvie")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Runs mean-field Volterra experiments and writes CSV results with a checksum manifest")
        .subcommand_required(true)
        .subcommand(common_args(Command::new("run").about("Run the recipe named in the config file")))
        .subcommand(Command::new("list").about("List recipes and their parameters"));
    for r in recipes::all() {
        cmd = cmd.subcommand(common_args(Command::new(r.name).about(r.about)));
    }
    cmd
}

fn load(recipe: Option<&str>, m: &ArgMatches) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            parse_config_for(&text, recipe).with_context(|| format!("in {}", path.display()))?
        }
        None => match recipe {
            Some(r) => ExperimentConfig::defaults(r)?,
            None => anyhow::bail!("`run` needs --config"),
        },
    };
    if let Some(s) = m.get_one::<String>("seed") {
        cfg.set("seed", s)?;
    }
    if let Some(o) = m.get_one::<String>("out") {
        cfg.set("out", o)?;
    }
    for kv in m.get_many::<String>("set").into_iter().flatten() {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn list(out: &mut impl Write) -> io::Result<()> {
    for r in recipes::all() {
        writeln!(out, "{}  {}", r.name, r.about)?;
        for p in r.params() {
            let section = if p.section == Section::Top { String::new() } else { format!("[{}] ", p.section.name()) };
            let default = match &p.default {
                mfsvie_cli::Value::Float(v) => format!("{v:?}"),
                other => other.to_string(),
            };
            writeln!(out, "    {section}{} = {default}    {}", p.key, p.help)?;
        }
    }
    Ok(())
}

/// Check verdicts and written paths. A closed stdout (e.g. `| head`) is not
/// an error of the run.
fn report(out: &mut impl Write, manifest: &mfsvie_cli::ResultManifest) -> io::Result<()> {
    for c in &manifest.checks {
        writeln!(out, "{}: {}", c.name, c.line())?;
    }
    for (file, _) in &manifest.files {
        writeln!(out, "wrote {}", manifest.path_of(file).display())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    if name == "list" {
        let _ = list(&mut io::stdout().lock());
        return ExitCode::SUCCESS;
    }
    let recipe = (name != "run").then_some(name);
    let result = load(recipe, sub).and_then(|cfg| run_experiment(&cfg));
    match result {
        Ok(manifest) => {
            let _ = report(&mut io::stdout().lock(), &manifest);
            if manifest.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
