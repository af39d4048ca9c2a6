use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LORASHOP_LOG", "warn")).init();
    let cli = lorashop_cli::Cli::parse();
    std::process::exit(lorashop_cli::commands::execute(&cli.invocation()));
}
