fn main() {
    std::process::exit(trialforge::cli::run(std::env::args_os()));
}
