fn main() {
    std::process::exit(vaekrnet::cli::main_with_args(std::env::args()));
}
