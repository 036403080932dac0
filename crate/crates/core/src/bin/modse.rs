fn main() -> std::process::ExitCode {
    modse::cli::main()
}
