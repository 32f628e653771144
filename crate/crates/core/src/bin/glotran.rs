fn main() {
    std::process::exit(glotran::cli::main());
}
