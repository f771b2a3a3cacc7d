fn main() {
    std::process::exit(fpm_core::cli::run_cli(std::env::args()));
}
