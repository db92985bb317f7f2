fn main() {
    std::process::exit(aqa_causal::cli::run(std::env::args_os()));
}
