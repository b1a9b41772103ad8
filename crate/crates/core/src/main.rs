fn main() {
    std::process::exit(flow_harmonize::cli::run(std::env::args_os()));
}
