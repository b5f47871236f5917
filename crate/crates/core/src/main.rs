fn main() -> std::process::ExitCode {
    cfedrag::cli::main()
}
