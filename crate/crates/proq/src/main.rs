fn main() {
    std::process::exit(proq::cli::run(std::env::args_os()));
}
