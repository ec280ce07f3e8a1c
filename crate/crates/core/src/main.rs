use std::process::ExitCode;

use normkit::cli;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Ok(v) = std::env::var("NORMKIT_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .expect("global pool is configured once");
            }
            _ => {
                eprintln!("error: NORMKIT_THREADS must be a positive integer, got `{v}`");
                return ExitCode::from(cli::EXIT_USAGE as u8);
            }
        }
    }
    ExitCode::from(cli::run(std::env::args_os()) as u8)
}
