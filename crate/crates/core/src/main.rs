use clap::Parser;
use embryoseg::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("embryoseg: {e}");
        std::process::exit(1);
    }
}
