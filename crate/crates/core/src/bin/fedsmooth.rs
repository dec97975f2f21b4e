use clap::Parser;

fn main() {
    let cli = fedsmooth::cli::Cli::parse();
    std::process::exit(fedsmooth::cli::execute(&cli));
}
