use clap::Parser;

fn main() {
    let cli = cvarppo_cli::Cli::parse();
    match cvarppo_cli::run(cli) {
        Ok(Some(dir)) => println!("{}", dir.display()),
        Ok(None) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
