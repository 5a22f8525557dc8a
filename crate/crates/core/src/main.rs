fn main() {
    std::process::exit(metassist::cli::run(std::env::args_os()));
}
