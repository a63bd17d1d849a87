use std::io;
use std::process::ExitCode;

fn main() -> ExitCode {
    let seed = std::env::var(wcord::cli::SEED_ENV).ok();
    let code = wcord::cli::run(std::env::args_os(), seed.as_deref(), &mut io::stdout(), &mut io::stderr());
    ExitCode::from(code as u8)
}
