fn main() {
    std::process::exit(ptmvqa_cli::run(std::env::args_os()));
}
