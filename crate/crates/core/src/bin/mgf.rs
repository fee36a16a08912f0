fn main() -> std::process::ExitCode {
    mgf::app::cli::main()
}
