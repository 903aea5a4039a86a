fn main() {
    std::process::exit(pollen::cli::main_with(std::env::args_os()));
}
