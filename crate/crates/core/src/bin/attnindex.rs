fn main() {
    std::process::exit(attnindex::cli::main());
}
