fn main() {
    std::process::exit(clmae_core::cli::cli_dispatch(std::env::args_os()));
}
