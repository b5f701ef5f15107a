fn main() {
    std::process::exit(vitnt::cli::main_with_args(std::env::args_os()));
}
