fn main() {
    std::process::exit(covbridge::cli::run(std::env::args_os()));
}
