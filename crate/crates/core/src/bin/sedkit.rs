fn main() {
    std::process::exit(sedkit::cli::run(std::env::args_os()));
}
