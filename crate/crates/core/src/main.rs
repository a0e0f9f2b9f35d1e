fn main() {
    std::process::exit(lactodyn::cli::run());
}
