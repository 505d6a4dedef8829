fn main() {
    std::process::exit(crmatch::cli::run_cli(std::env::args_os()));
}
