fn main() {
    std::process::exit(meltlab::cli::run(std::env::args_os()));
}
