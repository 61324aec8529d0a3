use std::process::ExitCode;

use gfn::config::parse_config;
use gfn::train::train_to_file;

fn main() -> ExitCode {
    let cfg = parse_config(std::env::args_os()).unwrap_or_else(|e| e.exit());
    match train_to_file(&cfg) {
        Ok(last) => {
            println!("{}", serde_json::to_string(&last).expect("metrics serialize"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("gfn-train: {e}");
            ExitCode::FAILURE
        }
    }
}
