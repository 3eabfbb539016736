use env_logger::Env;

fn main() {
    env_logger::Builder::from_env(Env::new().filter_or("DEPTHPROBE_LOG", "warn")).init();
    if let Err(e) = depthprobe_cli::run(std::env::args_os()) {
        eprintln!("{}", e.one_line());
        std::process::exit(e.exit_code());
    }
}
