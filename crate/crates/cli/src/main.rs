fn main() {
    std::process::exit(bnanchor::run(std::env::args_os()));
}
