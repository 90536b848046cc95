use std::io::Write;

fn main() {
    let env: Vec<(String, String)> = std::env::vars().collect();
    let stdin = std::io::stdin();
    let mut input = stdin.lock();
    let mut out = std::io::stdout().lock();
    let mut err = std::io::stderr();
    let code = codesearch_cli::run(std::env::args_os(), &env, &mut input, &mut out, &mut err);
    let _ = out.flush();
    std::process::exit(code);
}
