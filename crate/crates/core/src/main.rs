fn main() {
    std::process::exit(betaips::cli::cli_dispatch(std::env::args_os()));
}
