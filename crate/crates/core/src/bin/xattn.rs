fn main() {
    std::process::exit(xattn::cli::run(std::env::args_os()));
}
