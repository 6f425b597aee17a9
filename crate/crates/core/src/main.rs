fn main() {
    std::process::exit(tiltglm::cli::run(std::env::args_os()));
}
