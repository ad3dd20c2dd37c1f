fn main() {
    std::process::exit(tricontrast::cli::main_with_args(std::env::args_os()));
}
