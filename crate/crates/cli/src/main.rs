fn main() {
    std::process::exit(kgrag_cli::run(std::env::args_os()));
}
