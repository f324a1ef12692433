fn main() {
    std::process::exit(doublematch::cli::main_with_args(std::env::args_os()));
}
