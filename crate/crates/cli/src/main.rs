fn main() {
    std::process::exit(rsat_cli::run(std::env::args_os()));
}
