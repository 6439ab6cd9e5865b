fn main() {
    std::process::exit(csi_vae::cli::run(std::env::args_os()));
}
