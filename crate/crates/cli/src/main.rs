use clap::Parser;

use kmpadapt_cli::args::Cli;
use kmpadapt_cli::commands;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = commands::run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.code);
    }
}
