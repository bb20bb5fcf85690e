fn main() {
    std::process::exit(ctcmix_cli::run(std::env::args_os()));
}
