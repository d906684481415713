fn main() {
    std::process::exit(ldrpm_core::cli::run(std::env::args_os()));
}
