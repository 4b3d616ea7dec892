fn main() {
    std::process::exit(minet::cli::run(std::env::args_os()));
}
