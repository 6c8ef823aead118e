fn main() {
    std::process::exit(glk::cli::run(std::env::args_os()));
}
