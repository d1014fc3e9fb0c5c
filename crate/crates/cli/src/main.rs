use clap::Parser;

fn main() -> std::process::ExitCode {
    let cli = chaosens_cli::Cli::parse();
    match chaosens_cli::run_and_write(&cli) {
        Ok(report) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&report.summary).expect("serializable")
            );
            std::process::ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
