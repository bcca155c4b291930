use clap::Parser;
use stare_core::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match run(cli) {
        Ok(m) => println!("{}", m.outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join("\n")),
        Err(e) => {
            eprintln!("{}", e.to_json());
            std::process::exit(e.exit_code());
        }
    }
}
