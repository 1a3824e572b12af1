fn main() {
    std::process::exit(bdgd::cli::run(std::env::args_os()));
}
