fn main() {
    std::process::exit(vrnet::cli::run());
}
