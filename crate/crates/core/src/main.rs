fn main() {
    std::process::exit(bcqlm::cli::run(std::env::args_os()));
}
