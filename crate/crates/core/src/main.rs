fn main() {
    std::process::exit(gsd_core::cli::run(std::env::args_os()));
}
