fn main() {
    std::process::exit(iprompt::cli::run_from_args(std::env::args_os()));
}
