fn main() {
    std::process::exit(nashflex::cli::main_with_args(std::env::args_os()));
}
