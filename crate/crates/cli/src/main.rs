use clap::Parser;
use bayes_emu_cli::commands::{execute, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let json = cli.json;
    let code = match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            if json {
                eprintln!("{}", e.to_json());
            } else {
                eprintln!("error: {}", e.body.message);
            }
            1
        }
    };
    std::process::exit(code);
}
