fn main() {
    std::process::exit(stlog::cli::main_with_args(std::env::args_os()));
}
