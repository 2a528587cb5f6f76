use clap::Parser;

fn main() -> anyhow::Result<()> {
    pam_cli::cli::run(pam_cli::cli::Cli::parse())
}
