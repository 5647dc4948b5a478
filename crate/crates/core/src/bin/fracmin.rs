fn main() {
    std::process::exit(fracmin::cli::main_with(std::env::args_os()));
}
