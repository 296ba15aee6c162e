use clap::Parser;

use calcifuse_cli::{execute, Cli, Command};

fn main() {
    let cli = Cli::parse();
    match execute(&cli, std::env::vars()) {
        Ok((run, outcomes)) => {
            if let Command::ShowConfig = cli.command {
                print!("{}", run.cfg.snapshot());
            }
            println!("run {} at {}", run.id, run.dir.display());
            for o in outcomes {
                for w in &o.warnings {
                    eprintln!("warning: {}: {w}", o.stage);
                }
                for n in &o.notes {
                    println!("{}: {n}", o.stage);
                }
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
