fn main() {
    std::process::exit(trajmask::cli::run(std::env::args_os()));
}
