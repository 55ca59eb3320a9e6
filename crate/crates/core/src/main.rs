fn main() {
    std::process::exit(crowdnms::cli::main());
}
