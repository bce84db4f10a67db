fn main() {
    std::process::exit(dagi::cli::run_from(std::env::args_os()));
}
