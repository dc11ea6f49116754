fn main() {
    std::process::exit(w2r2::cli::run(std::env::args_os()));
}
