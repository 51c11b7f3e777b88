fn main() {
    std::process::exit(mfil_cli::run(std::env::args()));
}
