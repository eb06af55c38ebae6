fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    std::process::exit(mgvo_cli::cli::node_main(std::env::args().collect()));
}
