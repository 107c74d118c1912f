fn main() {
    std::process::exit(fsir::cli::run(std::env::args_os()));
}
