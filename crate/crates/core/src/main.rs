fn main() {
    std::process::exit(mtl_core::cli::cli_main(std::env::args_os()));
}
