fn main() {
    std::process::exit(dal_cli::run(std::env::args_os()));
}
