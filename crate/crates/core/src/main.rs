fn main() {
    std::process::exit(fsdet::cli::run(std::env::args_os()));
}
