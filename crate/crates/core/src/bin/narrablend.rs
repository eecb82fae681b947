fn main() {
    std::process::exit(narrablend::cli::run(std::env::args_os()));
}
