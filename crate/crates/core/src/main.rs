fn main() {
    std::process::exit(chanprune::harness::cli(std::env::args_os()));
}
