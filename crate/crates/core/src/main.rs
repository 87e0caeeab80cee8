fn main() {
    std::process::exit(lentil_sort::cli::run(std::env::args_os()));
}
