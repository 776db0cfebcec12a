use clap::Parser;

fn main() {
    let cli = gatefuse_cli::Cli::parse();
    let stdout = std::io::stdout();
    if let Err(e) = gatefuse_cli::run(cli, &mut stdout.lock()) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
