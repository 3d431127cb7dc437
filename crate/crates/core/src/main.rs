use clap::Parser;

fn main() {
    let cli = shotfit::cli::Cli::parse();
    if let Err(err) = shotfit::cli::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(shotfit::cli::exit_code(&err));
    }
}
