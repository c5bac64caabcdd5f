fn main() {
    std::process::exit(longbert::cli::run(std::env::args_os()));
}
