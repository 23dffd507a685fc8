fn main() {
    std::process::exit(defreg::cli::run(std::env::args_os()));
}
