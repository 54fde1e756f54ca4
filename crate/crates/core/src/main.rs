fn main() {
    std::process::exit(sparsekt::cli::cli_dispatch(std::env::args_os()));
}
