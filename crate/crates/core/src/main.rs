fn main() {
    std::process::exit(lrqk::cli::run_cli(std::env::args_os()));
}
