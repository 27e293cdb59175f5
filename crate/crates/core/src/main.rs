use clap::Parser;

use partalign::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        // Best effort; the pool may already exist in test harnesses.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
