fn main() {
    std::process::exit(fpnet::cli::parse_and_dispatch(std::env::args_os()));
}
