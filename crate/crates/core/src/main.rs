fn main() {
    std::process::exit(upsam::cli::run(std::env::args_os()));
}
