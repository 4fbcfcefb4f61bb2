use clap::Parser;

use panformer::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({
                    "error": { "kind": e.kind(), "message": e.to_string() }
                })
            );
            std::process::exit(e.exit_code());
        }
    }
}
