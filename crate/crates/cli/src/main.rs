use clap::Parser;

fn main() {
    let cli = attnseg::Cli::parse();
    std::process::exit(attnseg::execute(&cli.spec()));
}
