fn main() {
    std::process::exit(subaudit::cli::run(std::env::args_os()));
}
