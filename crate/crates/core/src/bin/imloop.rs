fn main() {
    std::process::exit(imloop::cli::dispatch(std::env::args_os()));
}
