fn main() {
    std::process::exit(augsel_cli::run(std::env::args_os()));
}
