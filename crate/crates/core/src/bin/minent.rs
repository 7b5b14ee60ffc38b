fn main() {
    std::process::exit(minent::cli::run(std::env::args_os()));
}
