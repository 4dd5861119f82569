fn main() {
    std::process::exit(cthdiff::cli::main_with(std::env::args_os()));
}
