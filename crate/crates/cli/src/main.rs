fn main() {
    std::process::exit(tomnet_cli::dispatch(std::env::args_os()));
}
