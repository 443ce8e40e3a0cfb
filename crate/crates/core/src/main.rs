fn main() {
    std::process::exit(stars::cli::run(std::env::args_os()));
}
