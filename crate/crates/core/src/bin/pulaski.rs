use clap::Parser;
use pulaski::cli::{run, Cli};

fn main() {
    std::process::exit(run(&Cli::parse()));
}
