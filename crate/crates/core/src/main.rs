fn main() {
    env_logger::init();
    let seed = std::env::var("MRLAB_SEED").ok();
    let code = mrlab_core::cli::run(std::env::args_os(), seed, &mut std::io::stdout());
    std::process::exit(code);
}
