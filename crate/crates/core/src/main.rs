fn main() {
    std::process::exit(glassopt::cli::run(std::env::args_os()));
}
