fn main() {
    std::process::exit(snnopt::cli::main(std::env::args_os()));
}
