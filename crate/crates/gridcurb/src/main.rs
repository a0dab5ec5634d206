fn main() {
    std::process::exit(gridcurb::cli::run(std::env::args_os()));
}
