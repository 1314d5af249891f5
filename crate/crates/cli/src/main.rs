fn main() {
    std::process::exit(sdd_cli::run(std::env::args_os()));
}
