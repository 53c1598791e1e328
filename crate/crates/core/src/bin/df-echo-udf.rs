//! Reference subprocess UDF; see `dfkit_core::engine::echo`.

fn main() -> std::process::ExitCode {
    std::process::ExitCode::from(dfkit_core::engine::echo::main(std::env::args().skip(1)))
}
