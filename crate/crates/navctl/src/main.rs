use clap::Parser;
use navctl::cli::Cli;
use navctl::error::NavError;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            let err = NavError::new("usage", first);
            eprintln!("{}", err.to_line());
            std::process::exit(err.exit_code());
        }
    };
    match navctl::commands::run(cli) {
        Ok(summary) => println!("{summary}"),
        Err(err) => {
            eprintln!("{}", err.to_line());
            std::process::exit(err.exit_code());
        }
    }
}
