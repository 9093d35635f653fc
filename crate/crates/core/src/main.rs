//! Binary entry point; all logic lives in [`bimamsleep::cli`].

fn main() {
    std::process::exit(bimamsleep::cli::run());
}
