fn main() {
    std::process::exit(gfr::cli::run_cli(std::env::args_os()));
}
