fn main() {
    std::process::exit(relaxseg::cli::run(std::env::args_os()));
}
