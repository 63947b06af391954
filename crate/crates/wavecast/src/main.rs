fn main() {
    std::process::exit(wavecast::cli::run(std::env::args_os()));
}
