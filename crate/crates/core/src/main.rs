fn main() {
    std::process::exit(iwivig::cli::run(std::env::args().collect()));
}
