fn main() {
    std::process::exit(compil::cli::main_with_args(std::env::args_os()));
}
