fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let args = std::env::args_os().map(|a| a.to_string_lossy().into_owned());
    std::process::exit(embeval_cli::run(args));
}
