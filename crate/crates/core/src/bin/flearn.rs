fn main() {
    std::process::exit(flearn::cli::dispatch(std::env::args_os()));
}
