fn main() {
    env_logger::init();
    std::process::exit(flowcast::cli::run_cli(std::env::args()));
}
