fn main() {
    std::process::exit(reason_core::cli::run(std::env::args_os()));
}
