fn main() -> std::process::ExitCode {
    umman::cli::main()
}
