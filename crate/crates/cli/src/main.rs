fn main() {
    std::process::exit(relbev_cli::run(std::env::args_os()));
}
