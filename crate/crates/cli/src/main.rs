use clap::Parser;
use pathweave_cli::{run, Cli, CliError};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PATHWEAVE_LOG", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let _ = e.print();
            let err = CliError::validation(e.kind().to_string());
            eprintln!("{}", err.json_line());
            std::process::exit(err.exit_code());
        }
    };
    if let Err(e) = run(&cli) {
        eprintln!("{}", e.json_line());
        std::process::exit(e.exit_code());
    }
}
