fn main() {
    std::process::exit(tumor_control::cli::run_command(std::env::args_os()));
}
