use std::process::ExitCode;

fn main() -> ExitCode {
    match ldm_lab::cli::run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // machine-readable failure report on stderr
            let payload = serde_json::json!({ "kind": e.kind(), "error": e.to_string() });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}
