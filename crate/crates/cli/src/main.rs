use std::io::Write;

fn main() {
    let result = feater_cli::run(std::env::args_os());
    print!("{}", result.summary);
    eprint!("{}", result.diagnostics);
    let _ = std::io::stdout().flush();
    std::process::exit(result.exit_code);
}
