fn main() {
    std::process::exit(kesdt::cli::main_with_args(std::env::args_os()));
}
