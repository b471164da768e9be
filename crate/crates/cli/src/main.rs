use clap::Parser;

fn main() {
    let cli = mntp_cli::Cli::parse();
    if let Err(e) = mntp_cli::run(cli) {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
