fn main() {
    std::process::exit(popql_lab::cli::dispatch(std::env::args_os()));
}
