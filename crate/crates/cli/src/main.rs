use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = vmask_cli::Cli::parse();
    if let Err(err) = vmask_cli::run(cli) {
        // Causes whose text already appears in an outer message are skipped.
        let mut msg = String::new();
        for cause in err.chain() {
            let text = cause.to_string();
            if !msg.contains(&text) {
                if !msg.is_empty() {
                    msg.push_str(": ");
                }
                msg.push_str(&text);
            }
        }
        eprintln!("error: {msg}");
        std::process::exit(vmask_cli::exit_code(&err));
    }
}
