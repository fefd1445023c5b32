fn main() {
    std::process::exit(medcot_cli::run_main());
}
