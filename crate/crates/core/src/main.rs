fn main() {
    std::process::exit(condrand::cli::main_with_args(std::env::args_os()));
}
