fn main() {
    std::process::exit(blapose_cli::run(std::env::args_os()));
}
