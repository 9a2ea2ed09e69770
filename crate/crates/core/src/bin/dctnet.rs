use clap::error::ErrorKind;
use clap::{CommandFactory, Parser};

use dctnet::cli::{exit_code, run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DCTNET_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) if matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => err.exit(),
        Err(err) => {
            let _ = err.print();
            let mut cmd = Cli::command();
            let name = std::env::args().nth(1).unwrap_or_default();
            let usage = match cmd.find_subcommand_mut(&name) {
                Some(sub) => sub.clone().bin_name(format!("dctnet {name}")).render_usage(),
                None => cmd.render_usage(),
            };
            eprintln!("\n{usage}");
            std::process::exit(2);
        }
    };
    if let Err(err) = run(&cli) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
