fn main() {
    std::process::exit(nesycap_cli::run(std::env::args_os()));
}
