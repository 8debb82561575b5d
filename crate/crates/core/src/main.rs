fn main() {
    std::process::exit(aidkit::cli::run(std::env::args_os()));
}
