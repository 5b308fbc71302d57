fn main() {
    let env: Vec<(String, String)> = std::env::vars().collect();
    std::process::exit(repe_cli::run(std::env::args_os(), env));
}
