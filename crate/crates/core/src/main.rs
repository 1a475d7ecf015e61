fn main() {
    std::process::exit(besim::cli::run(std::env::args_os()));
}
