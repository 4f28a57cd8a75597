fn main() {
    std::process::exit(sign_cli::main_with_args(std::env::args_os()));
}
