fn main() {
    std::process::exit(emonet::cli::main_with_args(std::env::args_os()));
}
