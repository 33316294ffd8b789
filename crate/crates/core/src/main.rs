fn main() {
    std::process::exit(sbseg::cli::run(std::env::args_os()));
}
