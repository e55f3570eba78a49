fn main() {
    std::process::exit(gpm_cli::run(std::env::args_os()));
}
