fn main() {
    std::process::exit(mgcn_cli::run(std::env::args_os()));
}
