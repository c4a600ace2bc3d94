fn main() {
    std::process::exit(stripbp::cli::run(std::env::args_os()));
}
