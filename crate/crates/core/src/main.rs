fn main() {
    std::process::exit(tagcomplete::cli::run(std::env::args_os()));
}
