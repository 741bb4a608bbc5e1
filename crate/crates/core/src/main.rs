fn main() {
    std::process::exit(regionseg::cli::run());
}
