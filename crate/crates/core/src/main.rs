fn main() {
    env_logger::init();
    std::process::exit(sptomo::cli::run(std::env::args_os()));
}
