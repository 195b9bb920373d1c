fn main() {
    std::process::exit(sgctx_cli::run(std::env::args_os()));
}
