fn main() {
    std::process::exit(advla::cli::main_with_args(std::env::args_os()));
}
