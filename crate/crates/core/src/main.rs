fn main() {
    std::process::exit(pquant::cli::main_with_std());
}
