use clap::Parser;
use saeaudit_cli::runlog::RunLog;
use saeaudit_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    let mut log = RunLog::new(true);
    std::process::exit(run(&cli, &mut log));
}
