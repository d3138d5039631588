fn main() -> std::process::ExitCode {
    torpido::cli::run(std::env::args_os())
}
