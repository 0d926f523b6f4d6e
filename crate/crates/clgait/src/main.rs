fn main() {
    clgait::tune_allocator();
    std::process::exit(clgait::cli::run(std::env::args_os()));
}
