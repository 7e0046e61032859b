fn main() {
    std::process::exit(innerthoughts::cli::run(std::env::args_os()));
}
