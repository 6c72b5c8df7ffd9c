fn main() {
    std::process::exit(maskprune::run(std::env::args_os()));
}
