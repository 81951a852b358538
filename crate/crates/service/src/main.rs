use clap::Parser;
use linkwerk_service::cli::{run, Cli};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    if let Err(e) = run(cli, args) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
