use clap::Parser;

fn main() {
    let cli = mvocc_cli::Cli::parse();
    let mut stdout = std::io::stdout();
    if let Err(e) = mvocc_cli::run(cli, &mut stdout) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
