fn main() {
    std::process::exit(bevloc::pipeline::cli::cli(std::env::args_os()));
}
