fn main() -> std::process::ExitCode {
    inkseg::cli::main_entry()
}
