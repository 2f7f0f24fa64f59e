fn main() {
    std::process::exit(ropelab::cli::run(std::env::args_os()));
}
