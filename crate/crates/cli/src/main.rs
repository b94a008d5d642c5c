fn main() {
    std::process::exit(gsw_cli::run_from(std::env::args_os()));
}
