fn main() {
    std::process::exit(anl_cli::run(std::env::args_os()));
}
