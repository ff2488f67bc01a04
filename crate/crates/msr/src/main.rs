fn main() {
    std::process::exit(msr::cli::run(std::env::args_os()));
}
