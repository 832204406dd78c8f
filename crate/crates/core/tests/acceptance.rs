//! Full acceptance suite with the bundled seed. Prints one PASS/FAIL line
//! per criterion and exits non-zero if any fails.

use std::process::ExitCode;

use lvt_core::harness::{acceptance_config, run_acceptance, AcceptOptions, ACCEPTANCE_SEED};

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temp dir");
    let options = AcceptOptions {
        work_dir: dir.path().to_path_buf(),
        ..AcceptOptions::default()
    };
    let results = match run_acceptance(&acceptance_config(ACCEPTANCE_SEED), &options, &mut |r| {
        println!("{r}")
    }) {
        Ok(r) => r,
        Err(e) => {
            println!("FAIL acceptance suite did not run: {e}");
            return ExitCode::FAILURE;
        }
    };
    let passed = results.iter().filter(|r| r.pass).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed == results.len() && results.len() == 12 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
