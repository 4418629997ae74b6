fn main() {
    std::process::exit(latent_cbc::cli::run());
}
