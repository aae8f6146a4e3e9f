use std::process::ExitCode;

fn main() -> ExitCode {
    // `cargo test -- <filter>` style arguments are ignored; everything runs
    let outcomes = match labctl::acceptance::run_selected(&[], |o| println!("{o}")) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("acceptance setup failed: {e}");
            return ExitCode::FAILURE;
        }
    };
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!("{} of {} criteria passed", outcomes.len() - failed, outcomes.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
