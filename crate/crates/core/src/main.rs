fn main() {
    std::process::exit(cotap_lab::cli::run_from_args(std::env::args_os()));
}
