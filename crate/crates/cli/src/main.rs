fn main() {
    floodvqa_cli::init_logging();
    std::process::exit(floodvqa_cli::main_with(std::env::args_os()));
}
