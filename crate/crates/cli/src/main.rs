fn main() {
    std::process::exit(rheat_cli::main_with_args(std::env::args_os()));
}
