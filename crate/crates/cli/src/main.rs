fn main() {
    std::process::exit(mafr_cli::run(std::env::args_os()));
}
