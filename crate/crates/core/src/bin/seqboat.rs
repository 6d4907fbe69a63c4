fn main() {
    std::process::exit(seqboat::cli::main_with_args(std::env::args_os()));
}
