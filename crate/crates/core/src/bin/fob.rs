fn main() {
    std::process::exit(fob::cli::run(std::env::args_os()));
}
