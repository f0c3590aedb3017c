fn main() {
    std::process::exit(gtp_cli::run(std::env::args_os()));
}
