fn main() {
    std::process::exit(mcml::harness::cli::main_with_env());
}
