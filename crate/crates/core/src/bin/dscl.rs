fn main() {
    std::process::exit(dscl_core::cli::main_with_args(std::env::args_os()));
}
