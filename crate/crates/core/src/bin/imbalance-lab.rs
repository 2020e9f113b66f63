fn main() {
    std::process::exit(imbalance_lab::cli::run(std::env::args_os()));
}
