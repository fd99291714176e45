fn main() {
    std::process::exit(freqseg::cli::run(std::env::args_os()));
}
