fn main() {
    std::process::exit(multits_cli::main_with_args(std::env::args_os()));
}
