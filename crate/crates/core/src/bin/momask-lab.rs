fn main() {
    std::process::exit(momask_lab::toolkit::cli::run(std::env::args_os()));
}
