use clap::Parser;
use normtweak::cli::{one_line, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {}", one_line(&e));
        std::process::exit(1);
    }
}
