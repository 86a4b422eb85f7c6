fn main() {
    std::process::exit(nb::cli::main());
}
