fn main() {
    std::process::exit(relfm::cli::run(std::env::args_os()));
}
