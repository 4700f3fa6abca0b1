use std::process::ExitCode;

use eeglang_cli::{execute, parse_from, CliError};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match parse_from(std::env::args_os()) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid command line").trim_start_matches("error: ");
            eprintln!("{}", CliError::Usage(first.to_string()).line());
            return ExitCode::from(2);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.global.threads.max(1)).build_global() {
        log::warn!("thread pool: {e}");
    }
    match execute(&cli) {
        Ok(out) => {
            for l in out.lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
