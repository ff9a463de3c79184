use clap::Parser;

fn main() {
    let cli = pointnl::cli::Cli::parse();
    std::process::exit(pointnl::cli::run(cli));
}
