fn main() {
    std::process::exit(oodkit::cli::main());
}
