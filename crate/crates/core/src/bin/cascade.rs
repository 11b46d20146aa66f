fn main() {
    std::process::exit(cascade::cli::main_with(std::env::args_os()));
}
