fn main() {
    std::process::exit(negdiff_cli::run(std::env::args_os()));
}
