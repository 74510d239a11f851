fn main() {
    std::process::exit(theta_fbsde::cli::run(std::env::args_os()));
}
