fn main() {
    std::process::exit(scratchcnn_cli::run(std::env::args_os()));
}
