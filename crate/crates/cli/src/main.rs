fn main() {
    std::process::exit(kvsim_cli::main_with_args(std::env::args_os()));
}
