fn main() {
    std::process::exit(radicalc::cli::run(std::env::args_os()));
}
