fn main() {
    std::process::exit(atroseg::cli::run(std::env::args_os()));
}
