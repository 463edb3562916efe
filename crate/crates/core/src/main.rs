fn main() {
    std::process::exit(etta::cli::run_command(std::env::args_os()));
}
