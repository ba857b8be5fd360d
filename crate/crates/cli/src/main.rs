fn main() {
    std::process::exit(relfeat_cli::run(std::env::args_os()));
}
