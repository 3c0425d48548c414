fn main() {
    std::process::exit(pixflow::cli::run(std::env::args_os()));
}
