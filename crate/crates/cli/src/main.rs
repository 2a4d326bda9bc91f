fn main() {
    let code = maxent_pref_cli::app::run_args(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
