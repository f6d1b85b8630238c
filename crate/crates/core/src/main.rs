fn main() {
    std::process::exit(bico::cli::main_with_args(std::env::args_os()));
}
