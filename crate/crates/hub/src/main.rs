use clap::error::ErrorKind;
use clap::Parser;
use partsdf_hub::cli::{run, Cli};
use partsdf_hub::exit;

fn main() {
    let json = std::env::args().any(|a| a == "--json");
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            if json {
                exit::usage_report(&e.to_string(), true);
            } else {
                let _ = e.print();
            }
            std::process::exit(exit::USAGE);
        }
    };
    let json = cli.json;
    if let Err(e) = run(cli) {
        exit::report(&e, json);
        std::process::exit(e.exit_code());
    }
}
