fn main() {
    std::process::exit(dope_harness::cli::run(std::env::args_os()));
}
