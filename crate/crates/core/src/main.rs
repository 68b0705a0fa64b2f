fn main() {
    std::process::exit(flora_core::cli::run(std::env::args_os()));
}
