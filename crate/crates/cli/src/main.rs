fn main() {
    std::process::exit(dcacrn_cli::run(std::env::args_os()));
}
