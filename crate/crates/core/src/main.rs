use clap::Parser;

fn main() {
    std::process::exit(mcgrad::cli::main_with(mcgrad::cli::Cli::parse()));
}
