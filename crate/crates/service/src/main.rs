use std::io::Write;
use std::process::ExitCode;

fn main() -> ExitCode {
    match segsteer::cli::run(std::env::args_os()) {
        Ok(out) => {
            print!("{out}");
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
