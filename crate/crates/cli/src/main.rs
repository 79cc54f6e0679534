fn main() {
    std::process::exit(xray_xplain_cli::run(std::env::args_os()));
}
