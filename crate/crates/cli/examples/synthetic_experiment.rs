//! Generates the two synthetic datasets and runs prepare, train, eval,
//! crosseval and report in `<dir>/run`.
//!
//! ```text
//! cargo run --release -p roadseg-cli --example synthetic_experiment -- /tmp/roadseg-demo
//! ```

use std::path::PathBuf;
use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let dir = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("roadseg-demo"));
    let config = match roadseg_cli::demo::write_synthetic_experiment(&dir, 7) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code());
        }
    };
    for cmd in ["prepare", "train", "eval", "crosseval", "report"] {
        let code = roadseg_cli::main_with_args(["roadseg", cmd, "--config", config.to_str().expect("utf-8 path")]);
        if code != ExitCode::SUCCESS {
            return code;
        }
    }
    ExitCode::SUCCESS
}
