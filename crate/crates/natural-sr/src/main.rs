fn main() { std::process::exit(natural_sr::cli::run()); }
