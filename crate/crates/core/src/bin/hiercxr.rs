fn main() {
    std::process::exit(hiercxr::cli::run(std::env::args_os()));
}
