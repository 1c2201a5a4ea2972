fn main() {
    std::process::exit(resattnet::cli::main_with_args(std::env::args_os()));
}
