use clap::Parser;
use leadtwin_cli::{run, Cli};

fn main() {
    // Usage errors exit with status 2 inside `parse`.
    let cli = Cli::parse();
    match run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
        }
        Err(e) => {
            eprintln!("{}", e.line());
            std::process::exit(e.exit_code());
        }
    }
}
