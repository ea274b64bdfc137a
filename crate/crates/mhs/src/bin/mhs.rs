fn main() {
    std::process::exit(mhs::cli::run());
}
