use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};
use latentgrade::Result;
use latentgrade_cli::commands;
use latentgrade_cli::config::{flag_name, RunConfig, KEYS};

fn cli() -> Command {
    let mut cmd = Command::new("latentgrade")
        .about("Fracture detection, grading and counterfactual editing in a diffusion autoencoder latent space")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("PATH")
                .global(true)
                .help("INI configuration file"),
        )
        .subcommand(Command::new("synth").about("Generate the synthetic dataset"))
        .subcommand(Command::new("train").about("Train the diffusion autoencoder"))
        .subcommand(Command::new("probe").about("Fit the fracture probe on semantic latents"))
        .subcommand(Command::new("calibrate").about("Map probe distances to grades"))
        .subcommand(
            Command::new("grade").about("Grade images").arg(
                Arg::new("images")
                    .required(true)
                    .num_args(1..)
                    .value_parser(clap::value_parser!(PathBuf)),
            ),
        )
        .subcommand(
            Command::new("sweep")
                .about("Edit one image across target grades")
                .arg(Arg::new("image").required(true).value_parser(clap::value_parser!(PathBuf))),
        )
        .subcommand(Command::new("eval").about("Evaluate on the test split"));
    for k in KEYS {
        let mut arg = Arg::new(k.key)
            .long(flag_name(k.key))
            .global(true)
            .help_heading(k.section)
            .help(if k.default.is_empty() || k.flag {
                k.help.to_string()
            } else {
                format!("{} [default: {}]", k.help, k.default)
            });
        arg = if k.flag {
            arg.action(ArgAction::SetTrue)
        } else {
            arg.value_name("VALUE")
        };
        cmd = cmd.arg(arg);
    }
    cmd
}

fn overrides(m: &ArgMatches) -> Vec<(String, String)> {
    KEYS.iter()
        .filter(|k| m.value_source(k.key) == Some(ValueSource::CommandLine))
        .map(|k| {
            let value = if k.flag {
                m.get_flag(k.key).to_string()
            } else {
                m.get_one::<String>(k.key).cloned().unwrap_or_default()
            };
            (k.key.to_string(), value)
        })
        .collect()
}

fn run(m: &ArgMatches) -> Result<()> {
    let (name, sub) = m.subcommand().expect("subcommand is required");
    let file = sub.get_one::<String>("config").map(PathBuf::from);
    let cfg = RunConfig::resolve(file.as_deref(), &overrides(sub))?;
    match name {
        "synth" => commands::synth(&cfg),
        "train" => commands::train(&cfg),
        "probe" => commands::probe(&cfg),
        "calibrate" => commands::calibrate(&cfg),
        "grade" => {
            let images: Vec<PathBuf> = sub.get_many::<PathBuf>("images").into_iter().flatten().cloned().collect();
            commands::grade(&cfg, &images)
        }
        "sweep" => commands::sweep(&cfg, sub.get_one::<PathBuf>("image").expect("required")),
        "eval" => commands::eval(&cfg),
        other => unreachable!("unhandled subcommand {other}"),
    }
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            let _ = e.print();
            return ExitCode::from(2);
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
