use std::io;
use std::process::ExitCode;

fn main() -> ExitCode {
    let env = |k: &str| std::env::var(k).ok();
    let code = terrabyte::cli::run(std::env::args_os(), &env, &mut io::stdin().lock(), &mut io::stdout(), &mut io::stderr());
    ExitCode::from(code as u8)
}
