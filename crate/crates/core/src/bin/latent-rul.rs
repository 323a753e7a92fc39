fn main() {
    std::process::exit(latent_rul::cli::run(std::env::args_os()));
}
