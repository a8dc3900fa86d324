fn main() {
    std::process::exit(lorafleet::cli::run(std::env::args_os()))
}
