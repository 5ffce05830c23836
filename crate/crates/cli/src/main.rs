use clap::Parser;
use lfcbm_cli::cli::{run, Cli};

fn main() -> anyhow::Result<()> {
    lfcbm_cli::init_threads()?;
    run(Cli::parse())
}
