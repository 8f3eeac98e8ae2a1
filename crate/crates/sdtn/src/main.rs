fn main() {
    std::process::exit(sdtn::cli::run());
}
