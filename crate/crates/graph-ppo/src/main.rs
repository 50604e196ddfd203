use clap::Parser;
use graph_ppo::cli;

fn main() {
    let args = cli::Cli::parse();
    if let Err(err) = cli::run(args) {
        eprintln!("error[{}]: {err}", err.class());
        std::process::exit(1);
    }
}
