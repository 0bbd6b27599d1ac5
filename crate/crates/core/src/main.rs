fn main() {
    std::process::exit(mmard::cli::main_with(std::env::args_os()));
}
