fn main() {
    std::process::exit(convtx::cli::run(std::env::args_os()));
}
