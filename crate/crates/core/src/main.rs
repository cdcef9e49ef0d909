fn main() {
    std::process::exit(point3d::cli::run_from(std::env::args_os()));
}
