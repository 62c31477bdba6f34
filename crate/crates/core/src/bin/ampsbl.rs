fn main() {
    std::process::exit(ampsbl::cli::run(std::env::args_os()));
}
