fn main() {
    std::process::exit(ctg_core::cli_io::run_cli(std::env::args_os()));
}
