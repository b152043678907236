fn main() {
    std::process::exit(pcbmerge::cli::run());
}
