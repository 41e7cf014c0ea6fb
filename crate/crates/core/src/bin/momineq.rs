fn main() {
    std::process::exit(momineq::cli::run(std::env::args_os()));
}
