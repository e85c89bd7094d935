use clap::Parser;

fn main() {
    let cli = latcert::cli::Cli::parse();
    std::process::exit(latcert::cli::run(cli));
}
