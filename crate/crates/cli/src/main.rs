fn main() {
    std::process::exit(scalar_cli::main_with(std::env::args()));
}
