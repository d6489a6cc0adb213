//! Runs every experiment on the default synthetic corpus and prints the reports.

use std::time::Instant;

use ghost_core::experiments::*;

fn main() -> ghost_core::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let t = Instant::now();
    let p = Pipeline::build(ExperimentConfig::default().with_seed(seed))?;
    let show = |name: &str, v: String| println!("[{:>6.1}s] {name}: {v}", t.elapsed().as_secs_f64());
    show("search", serde_json::to_string(&search_report(&p, 100)?).unwrap());
    show("selection", serde_json::to_string(&selection_report(&p, 20, 50)?).unwrap());
    show("leakage", serde_json::to_string(&leakage_report(&p)?).unwrap());
    let tuned = tune(&p)?;
    show("utility", serde_json::to_string(&utility_report(&p, &tuned)?).unwrap());
    let th = theory_report(&p, &tuned)?;
    show("theory", format!("{:?} {:?} {:?}", th.drift, th.regression, th.loss_ordering));
    show("adaptive", serde_json::to_string(&adaptive_report(&p, &tuned.pairs)?).unwrap());
    print!("{}", ablation_report(&p)?.to_csv());
    show("done", String::new());
    Ok(())
}
