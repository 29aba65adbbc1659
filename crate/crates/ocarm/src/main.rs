use clap::Parser;

fn main() {
    let cli = ocarm::cli::Cli::parse();
    std::process::exit(ocarm::cli::run(cli));
}
