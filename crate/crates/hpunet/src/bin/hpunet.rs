use clap::Parser;

fn main() {
    let cli = hpunet::cli::Cli::parse();
    std::process::exit(hpunet::cli::run(cli));
}
