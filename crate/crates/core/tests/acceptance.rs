//! One PASS/FAIL line per acceptance criterion. Exits non-zero on any failure.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ghost_core::corpus::{EmbeddingTable, LabeledSentence};
use ghost_core::experiments::{run_all, write_report_files, ExperimentConfig, FullReport, Pipeline};
use ghost_core::geometry::{top_k_neighbors, NeighborIndex};
use ghost_core::metrics::{meteor_lite, rouge_l, rouge_n};
use ghost_core::model::{random_config, Model};
use ghost_core::rng;
use ghost_core::shadow_search::HeuristicFlags;
use ghost_core::shadow_select::SelectMode;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

struct Gate {
    failed: usize,
}

impl Gate {
    fn check(&mut self, id: usize, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let out = f();
        let took = t.elapsed();
        let over = took > budget;
        let (ok, detail) = match out {
            Ok(d) if !over => (true, d),
            Ok(d) => (false, format!("{d}; over the {}s budget", budget.as_secs())),
            Err(d) => (false, d),
        };
        if !ok {
            self.failed += 1;
        }
        println!(
            "{} criterion {id:>2} {name}: {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
    }
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn oracle_top_k(table: &EmbeddingTable, t: usize, k: usize) -> Vec<usize> {
    let q = table.row_f64(t);
    let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut all: Vec<(f64, usize)> = (0..table.rows())
        .filter(|&j| j != t)
        .map(|j| {
            let r = table.row_f64(j);
            let d: f64 = q.iter().zip(&r).map(|(a, b)| a * b).sum();
            let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            ((1.0 - d / (qn * rn)).clamp(0.0, 2.0), j)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|x| x.1).collect()
}

/// Random table with duplicated and rescaled rows so ties are common.
fn tie_heavy_table(seed: u64) -> EmbeddingTable {
    let mut r = rng::seeded(seed);
    let n = r.random_range(20..=500);
    let d = r.random_range(2..=32);
    let mut data: Vec<f32> = Vec::with_capacity(n * d);
    for i in 0..n {
        if i > 0 && r.random_bool(0.2) {
            let src = r.random_range(0..i);
            let scale = [1.0f32, 2.0, 0.5][r.random_range(0..3)];
            let row: Vec<f32> = data[src * d..(src + 1) * d].iter().map(|v| v * scale).collect();
            data.extend(row);
        } else {
            data.extend((0..d).map(|_| -> f32 { StandardNormal.sample(&mut r) }));
        }
    }
    EmbeddingTable::new(data, n, d).unwrap()
}

fn neighbor_oracle() -> Outcome {
    let mut checked = 0;
    for seed in 0..20 {
        let table = tie_heavy_table(seed);
        let n = table.rows();
        let index = NeighborIndex::build(&table);
        for k in [1, 5, n - 1] {
            for t in 0..n {
                let want = oracle_top_k(&table, t, k);
                if top_k_neighbors(t, k, &table).map_err(|e| e.to_string())? != want {
                    return Err(format!("brute-force scan disagrees at table {seed}, t={t}, k={k}"));
                }
                if index.top_k(t, k).map_err(|e| e.to_string())? != want {
                    return Err(format!("neighbor index disagrees at table {seed}, t={t}, k={k}"));
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} queries over 20 tables match the full-sort oracle"))
}

fn gradient_oracle() -> Outcome {
    let mut r = rng::seeded(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let cfg = random_config(&mut r, 9);
        let batch: Vec<LabeledSentence> = (0..2)
            .map(|_| LabeledSentence {
                tokens: (0..r.random_range(1..=cfg.max_len)).map(|_| r.random_range(0..9)).collect(),
                label: r.random_range(0..cfg.n_classes),
                raw: String::new(),
            })
            .collect();
        let mut m = Model::new(cfg, None).map_err(|e| e.to_string())?;
        let (_, g) = m.loss_and_gradients(&batch).map_err(|e| e.to_string())?;
        let h = 1e-5;
        for i in 0..m.n_params() {
            let orig = m.params()[i];
            m.params_mut()[i] = orig + h;
            let up = m.loss(&batch).unwrap();
            m.params_mut()[i] = orig - h;
            let down = m.loss(&batch).unwrap();
            m.params_mut()[i] = orig;
            let num = (up - down) / (2.0 * h);
            let a = g.values[i];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
        }
    }
    verdict(worst < 1e-4, format!("max relative error {worst:.2e} over 3 random configs (limit 1e-4)"))
}

fn metric_oracles() -> Outcome {
    let w = |s: &str| ghost_core::corpus::normalize(s);
    let id = |s: &String| s.clone();
    let lem = |s: &String| if s == "went" { "go".to_string() } else { s.clone() };
    let orig = w("The compromise apparently ends six months of stalled negotiations.");
    let obf = w("Becauseromising bizarre concluded THREE kilometers had discouraged tensions.");
    let cases: [(&str, f64, f64); 10] = [
        ("rouge1 identical", rouge_n(&w("a b c"), &w("a b c"), 1).unwrap(), 1.0),
        ("rouge1 a b c / a x c", rouge_n(&w("a b c"), &w("a x c"), 1).unwrap(), 2.0 / 3.0),
        ("rouge1 shadow pair", rouge_n(&obf, &orig, 1).unwrap(), 0.0),
        ("rouge2 a x c / a b c", rouge_n(&w("a x c"), &w("a b c"), 2).unwrap(), 0.0),
        ("rouge2 a b x / a b c", rouge_n(&w("a b x"), &w("a b c"), 2).unwrap(), 0.5),
        ("rougeL identical", rouge_l(&w("a b c d"), &w("a b c d")), 1.0),
        ("rougeL a b c d / a c b d", rouge_l(&w("a b c d"), &w("a c b d")), 0.75),
        ("meteor disjoint", meteor_lite(&w("a b"), &w("c d"), id), 0.0),
        ("meteor single token", meteor_lite(&w("a"), &w("a"), id), 0.5),
        ("meteor went home / go home", meteor_lite(&w("went home"), &w("go home"), lem), 0.9375),
    ];
    for (name, got, want) in cases {
        if (got - want).abs() > 1e-9 {
            return Err(format!("{name}: {got} != {want}"));
        }
    }
    Ok(format!("{} hand-computed values reproduced to 1e-9", cases.len()))
}

fn main() -> ExitCode {
    let mut gate = Gate { failed: 0 };
    let s = Duration::from_secs;
    gate.check(1, "neighbor oracle", s(30), neighbor_oracle);
    gate.check(2, "gradient oracle", s(60), gradient_oracle);
    gate.check(3, "metric oracles", s(5), metric_oracles);

    let t = Instant::now();
    let cfg = ExperimentConfig::default();
    let run = Pipeline::build(cfg.clone()).and_then(|p| run_all(&p));
    let pipeline_time = t.elapsed();
    println!("     full pipeline run took {:.1}s", pipeline_time.as_secs_f64());
    let r: FullReport = match run {
        Ok(r) => r,
        Err(e) => {
            println!("FAIL criteria 4-11: pipeline error: {e}");
            return ExitCode::FAILURE;
        }
    };
    // The shared run counts against every budget below.
    let within = |b: u64| pipeline_time < s(b);

    gate.check(4, "search soundness", s(60), || {
        let x = &r.search;
        verdict(
            within(60) && x.empty_sets == 0 && x.violations == 0 && x.checked_pairs >= 100,
            format!(
                "{} keys, {} empty sets, {} fallbacks, {} violations in {} re-checked pairs",
                x.n_keys, x.empty_sets, x.fallbacks, x.violations, x.checked_pairs
            ),
        )
    });
    gate.check(5, "selection optimality and monotonicity", s(120), || {
        let x = &r.selection;
        verdict(
            within(120) && x.tiny_instances == 50 && x.tiny_optimal == 50 && x.monotone == x.sweep_sentences,
            format!(
                "{}/{} tiny instances optimal, {}/{} sweep histories non-increasing",
                x.tiny_optimal, x.tiny_instances, x.monotone, x.sweep_sentences
            ),
        )
    });
    gate.check(6, "defense efficacy", s(300), || {
        let x = &r.leakage;
        verdict(
            within(300) && x.n == 64 && x.undefended_r1 >= 0.99 && x.ghost_r1 <= 0.10,
            format!(
                "leakage ROUGE-1 undefended {:.3} (>= 0.99), ghost {:.3} (<= 0.10); noise {:.3}, prune {:.3}",
                x.undefended_r1, x.ghost_r1, x.noise_r1, x.prune_r1
            ),
        )
    });
    gate.check(7, "utility preservation", s(600), || {
        let x = &r.utility;
        let (base, orig, obf) = (x.pretrained.accuracy, x.original.accuracy, x.obfuscated.accuracy);
        verdict(
            within(600) && (orig - obf).abs() <= 0.15 && orig >= base + 0.2 && obf >= base + 0.2,
            format!("accuracy original {orig:.3}, obfuscated {obf:.3} (gap <= 0.15), baseline {base:.3} (margin >= 0.2)"),
        )
    });
    gate.check(8, "theory validation", s(300), || {
        let x = &r.theory.regression;
        verdict(
            within(300) && x.mean_grad_dev > x.mean_loss_dev && x.slope_grad > x.slope_loss,
            format!(
                "mean deviation grad {:.3} > loss {:.3}; slope grad {:.4} > loss {:.4}",
                x.mean_grad_dev, x.mean_loss_dev, x.slope_grad, x.slope_loss
            ),
        )
    });
    gate.check(9, "adaptive-attack resilience", s(300), || {
        let x = &r.adaptive;
        let worst = x.strategies.values().copied().fold(0.0, f64::max);
        verdict(
            within(300) && worst <= 0.35 && x.baseline_r1 - worst >= 0.5,
            format!(
                "worst strategy ROUGE-1 {worst:.3} (<= 0.35), undefended baseline {:.3}; {:?}",
                x.baseline_r1, x.strategies
            ),
        )
    });
    gate.check(10, "ablation directionality", s(600), || {
        let x = &r.ablation;
        let on = HeuristicFlags::all_on();
        let get = |f, m| x.row(f, m).ok_or_else(|| format!("missing ablation row {m:?}"));
        let all_on = get(on, SelectMode::Optimized)?;
        let all_off = get(HeuristicFlags::all_off(), SelectMode::Optimized)?;
        let near = get(on, SelectMode::Nearest)?;
        let rand = get(on, SelectMode::Random)?;
        verdict(
            within(600) && all_off.meteor >= all_on.meteor && all_on.mse <= near.mse && near.mse <= rand.mse,
            format!(
                "METEOR all off {:.3} >= all on {:.3}; MSE optimized {:.4} <= nearest {:.4} <= random {:.4}",
                all_off.meteor, all_on.meteor, all_on.mse, near.mse, rand.mse
            ),
        )
    });
    gate.check(11, "determinism", s(600), || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let files = write_report_files(&a, &r).map_err(|e| e.to_string())?;
        let again = Pipeline::build(cfg.clone())
            .and_then(|p| run_all(&p))
            .map_err(|e| e.to_string())?;
        write_report_files(&b, &again).map_err(|e| e.to_string())?;
        let read = |d: &Path, f: &str| fs::read(d.join(f)).map_err(|e| e.to_string());
        for f in &files {
            if read(&a, f)? != read(&b, f)? {
                return Err(format!("{f} differs between runs"));
            }
        }
        Ok(format!("{} report files byte-identical across two runs", files.len()))
    });

    println!("{} of 11 criteria passed", 11 - gate.failed);
    if gate.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
