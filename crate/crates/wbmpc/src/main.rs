fn main() {
    std::process::exit(wbmpc::cli::main_entry());
}
