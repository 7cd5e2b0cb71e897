fn main() {
    std::process::exit(mmger::cli::run(std::env::args_os()));
}
