fn main() {
    std::process::exit(wselect::cli::main_with(std::env::args_os()));
}
