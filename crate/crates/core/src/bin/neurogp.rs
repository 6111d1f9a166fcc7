fn main() {
    std::process::exit(neurogp::cli::run(std::env::args_os()));
}
