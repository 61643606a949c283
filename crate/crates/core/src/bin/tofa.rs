fn main() {
    std::process::exit(tofa::cli::main_with_args(std::env::args_os()));
}
