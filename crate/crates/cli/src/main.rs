use clap::Parser;
use gmlab_cli::error::{EXIT_CONFIG, EXIT_OK};
use gmlab_cli::{error_json, run, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            std::process::exit(EXIT_OK);
        }
        Err(e) => {
            eprintln!("{}", error_json("usage", e.to_string().trim(), EXIT_CONFIG));
            std::process::exit(EXIT_CONFIG);
        }
    };
    match run(&cli) {
        Ok(dir) => println!("{}", dir.display()),
        Err(e) => {
            let code = e.exit_code();
            eprintln!("{}", error_json(e.kind(), &e.to_string(), code));
            std::process::exit(code);
        }
    }
}
