fn main() {
    std::process::exit(mingraph_cli::run_cli(std::env::args_os()));
}
