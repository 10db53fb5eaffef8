fn main() {
    std::process::exit(tvwflow::cli::main_with_args(std::env::args_os()));
}
