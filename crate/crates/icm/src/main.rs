use std::process::ExitCode;

fn main() -> ExitCode {
    match icm::cli::run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // One machine-readable line on stderr; scripts match on "kind".
            eprintln!(
                "{}",
                serde_json::json!({ "error": err.to_string(), "kind": err.kind() })
            );
            ExitCode::FAILURE
        }
    }
}
