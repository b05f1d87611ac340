use clap::Parser;

use catalog_core::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
