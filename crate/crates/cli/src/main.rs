fn main() {
    std::process::exit(deskformer_cli::run(std::env::args_os()));
}
