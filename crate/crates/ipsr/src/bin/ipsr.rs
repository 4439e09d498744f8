use env_logger::Env;

fn main() {
    env_logger::Builder::from_env(
        Env::new().filter_or("IPSR_LOG", "info"),
    )
    .format_timestamp(None)
    .init();
    std::process::exit(ipsr::cli::run(std::env::args_os()));
}
