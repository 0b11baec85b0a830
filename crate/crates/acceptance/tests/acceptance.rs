//! Runs every acceptance criterion, printing one PASS/FAIL line per
//! criterion, and exits non-zero if any fails.
//!
//! `cargo test -p cycleflow-acceptance -- 1 3` runs a subset.

use std::collections::BTreeSet;
use std::io::Write;
use std::process::ExitCode;

use cycleflow_acceptance::*;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let wanted: BTreeSet<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let selected = |n: usize| wanted.is_empty() || wanted.contains(&n);

    let mut failures = 0;
    let mut emit = |n: usize, name: &str, o: Outcome| {
        if !o.pass {
            failures += 1;
        }
        let status = if o.pass { "PASS" } else { "FAIL" };
        // Written to the raw handle so the line shows even when output is captured.
        let _ = writeln!(std::io::stderr().lock(), "criterion {n} {name}: {status} {}", o.detail);
    };

    if selected(1) {
        emit(1, "exactness", timed(Some(1.0), exactness));
    }
    if selected(2) {
        emit(2, "gradients", timed(Some(60.0), gradients));
    }
    if selected(3) {
        emit(3, "solver order", timed(Some(10.0), solver_order));
    }
    if selected(4) {
        emit(4, "base flow matching", timed(Some(600.0), base_cfm));
    }
    if (5..=8).any(selected) {
        let run = DefaultRun::start();
        if selected(5) {
            emit(5, "end-to-end conversion", end_to_end(&run));
        }
        if selected(6) {
            emit(6, "ablation directions", timed(None, || ablations(&run)));
        }
        if selected(7) {
            emit(7, "round trip", timed(None, || round_trip(&run)));
        }
        if selected(8) {
            emit(8, "reproducibility", timed(None, || reproducibility(&run)));
        }
    }

    let mut err = std::io::stderr().lock();
    if failures == 0 {
        let _ = writeln!(err, "acceptance: all selected criteria passed");
        ExitCode::SUCCESS
    } else {
        let _ = writeln!(err, "acceptance: {failures} criteria failed");
        ExitCode::FAILURE
    }
}
