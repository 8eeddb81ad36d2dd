fn main() {
    std::process::exit(omnimer::cli::run(std::env::args_os()));
}
