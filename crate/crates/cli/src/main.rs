fn main() -> std::process::ExitCode {
    fdgan_cli::run(std::env::args_os())
}
