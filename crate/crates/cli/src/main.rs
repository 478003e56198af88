fn main() {
    std::process::exit(hyperbrain_cli::run(std::env::args_os()));
}
