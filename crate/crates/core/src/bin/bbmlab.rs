fn main() {
    std::process::exit(bbmlab::cli::run_command(std::env::args_os()));
}
