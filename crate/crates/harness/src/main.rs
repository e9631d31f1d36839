use std::process::ExitCode;

fn main() -> ExitCode {
    let matches = kalnat_harness::cli::command().get_matches();
    match kalnat_harness::cli::dispatch(&matches) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
