fn main() {
    std::process::exit(dkan_driver::main_with_args(std::env::args_os()));
}
