use clap::Parser;
use sidrank::commands::{execute, Cli};

fn main() {
    std::process::exit(execute(Cli::parse()));
}
