fn main() {
    std::process::exit(hazardfield::cli::run(std::env::args_os()));
}
