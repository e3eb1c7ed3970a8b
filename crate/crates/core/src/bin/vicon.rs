fn main() {
    std::process::exit(vicon::cli::run(std::env::args_os()));
}
