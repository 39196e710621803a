use clap::Parser;
use eastlab_cli::{run, Cli};

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    match run(&cli, argv) {
        Ok(out) => println!("{out}"),
        Err(e) => {
            eprintln!("eastlab: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
