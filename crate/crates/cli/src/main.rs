use clap::Parser;

fn main() {
    let cli = lamoco_cli::Cli::parse();
    if let Err(e) = lamoco_cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
