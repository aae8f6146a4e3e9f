use clap::Parser;

fn main() {
    let cli = labctl::cli::Cli::parse();
    std::process::exit(labctl::cli::main_with(&cli));
}
