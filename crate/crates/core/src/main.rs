fn main() {
    std::process::exit(nsreg::cli::run(std::env::args_os()));
}
