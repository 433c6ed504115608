fn main() {
    std::process::exit(evplan::cli::run(std::env::args_os()));
}
