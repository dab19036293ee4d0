fn main() {
    let code = falloutsim::cli::parse_and_run(std::env::args_os(), &mut std::io::stdout().lock(), &mut std::io::stderr().lock());
    std::process::exit(code);
}
