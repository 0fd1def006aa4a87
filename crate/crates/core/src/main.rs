fn main() {
    std::process::exit(mir_core::cli::main());
}
