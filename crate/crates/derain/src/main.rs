fn main() {
    std::process::exit(derain::cli::main());
}
