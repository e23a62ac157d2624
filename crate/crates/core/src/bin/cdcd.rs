fn main() {
    std::process::exit(cdcd::cli::main_with_args(std::env::args_os()));
}
