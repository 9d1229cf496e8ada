fn main() {
    std::process::exit(speechclip::cli::run(std::env::args_os()));
}
