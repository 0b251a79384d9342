//! Acceptance suite: one pass/fail line per criterion, non-zero exit when
//! any criterion fails. Positional arguments select criteria by number.

use slowfast_core::validation::{run_criterion, Scale, Status, CRITERIA, DEFAULT_SEED};

fn main() {
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failures = 0;
    for (id, _) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let report = run_criterion(id, Scale::Full, DEFAULT_SEED).expect("known criterion");
        println!("{report}");
        if report.status == Status::Fail {
            failures += 1;
        }
    }
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
}
