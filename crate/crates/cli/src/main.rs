fn main() {
    std::process::exit(percept_reach_cli::run(std::env::args_os()));
}
