fn main() {
    std::process::exit(htc_core::cli::run(std::env::args_os()));
}
