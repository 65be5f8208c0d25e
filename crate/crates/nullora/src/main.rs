fn main() {
    std::process::exit(nullora::cli::run(std::env::args_os()));
}
