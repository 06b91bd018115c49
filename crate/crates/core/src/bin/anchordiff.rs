fn main() {
    std::process::exit(anchordiff::cli::main_with_args(std::env::args_os()));
}
