fn main() {
    std::process::exit(pmoe_core::cli::cli_main(std::env::args_os()));
}
