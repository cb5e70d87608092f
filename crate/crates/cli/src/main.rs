fn main() {
    let mut stdout = std::io::stdout().lock();
    let code = triggerless_cli::execute(std::env::args_os(), &mut stdout);
    std::process::exit(code);
}
