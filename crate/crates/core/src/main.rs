fn main() {
    std::process::exit(opdeob::cli::main_with(std::env::args_os()));
}
