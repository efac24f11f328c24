fn main() {
    std::process::exit(smile_core::cli::run(std::env::args_os()));
}
