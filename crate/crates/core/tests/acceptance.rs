//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `INIT_ACCEPT_QUICK=1` shortens the ablation criterion to 500 steps per arm
//! for development; its line is then marked as a quick run.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use initgan::eval::{evaluate, run_ablation, thread_cap, AblationTable, Variant};
use initgan::training::{train, TrainConfig};
use initgan::verify::{self, CheckResult};
use initgan::Result;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    /// Empirical criteria are reported but do not set the exit code.
    gating: bool,
}

struct Outcome {
    passed: bool,
    summary: String,
}

fn from_checks(checks: Result<Vec<CheckResult>>) -> Outcome {
    match checks {
        Ok(checks) => {
            let failed: Vec<&CheckResult> = checks.iter().filter(|c| !c.passed).collect();
            let mut shown = if failed.is_empty() {
                checks.iter().collect()
            } else {
                failed
            };
            let count = checks.len();
            let truncated = shown.len() > 4;
            if truncated {
                shown.sort_by(|a, b| margin(b).total_cmp(&margin(a)));
                shown.truncate(1);
            }
            let summary = shown
                .iter()
                .map(|c| format!("{}={:.3e} ({} {:.1e})", c.name, c.measured, c.comparison, c.threshold))
                .collect::<Vec<_>>()
                .join("; ");
            Outcome {
                passed: checks.iter().all(|c| c.passed),
                summary: if truncated {
                    format!("{count} checks, worst {summary}")
                } else {
                    summary
                },
            }
        }
        Err(e) => Outcome {
            passed: false,
            summary: format!("error: {e}"),
        },
    }
}

/// Measured over threshold for upper bounds; larger is closer to failing.
fn margin(c: &CheckResult) -> f64 {
    match c.comparison {
        "<" | "<=" if c.threshold > 0.0 => c.measured / c.threshold,
        _ => 0.0,
    }
}

fn concat(parts: Vec<Result<Vec<CheckResult>>>) -> Result<Vec<CheckResult>> {
    let mut all = Vec::new();
    for p in parts {
        all.extend(p?);
    }
    Ok(all)
}

fn ablation_outcome(table: &AblationTable, seeds: &[u64], quick: bool) -> Outcome {
    let mut fid_wins = 0;
    let mut acc_wins = 0;
    let mut cells = Vec::new();
    for &seed in seeds {
        match (table.report(Variant::C, seed), table.report(Variant::E, seed)) {
            (Some(c), Some(e)) => {
                fid_wins += usize::from(c.fid <= e.fid);
                acc_wins += usize::from(c.mean_acc >= e.mean_acc);
                cells.push(format!(
                    "s{seed}: fid {:.4}/{:.4} acc {:.4}/{:.4}",
                    c.fid, e.fid, c.mean_acc, e.mean_acc
                ));
            }
            _ => cells.push(format!("s{seed}: arm failed")),
        }
    }
    let need = 4;
    Outcome {
        passed: fid_wins >= need && acc_wins >= need,
        summary: format!(
            "{}FID(c)<=FID(e) in {fid_wins}/{} seeds, acc(c)>=acc(e) in {acc_wins}/{} seeds (need {need}); {}",
            if quick { "[quick run] " } else { "" },
            seeds.len(),
            seeds.len(),
            cells.join(", ")
        ),
    }
}

fn determinism() -> std::result::Result<Outcome, Box<dyn std::error::Error>> {
    let config = TrainConfig {
        steps: 60,
        embed_steps: 100,
        checkpoint_every: 0,
        eval_samples: 500,
        ..Default::default()
    };
    let dirs = [tempfile::tempdir()?, tempfile::tempdir()?];
    let mut ckpts = Vec::new();
    let mut metrics = Vec::new();
    for d in &dirs {
        let out = train(config.clone(), Some(d.path()))?;
        ckpts.push(std::fs::read(d.path().join("step_60.ckpt"))?);
        metrics.push(std::fs::read(d.path().join("metrics.jsonl"))?);
        let a = evaluate(&out.state.spec, &out.state.generator, 500, 0)?;
        let b = evaluate(&out.state.spec, &out.state.generator, 500, 0)?;
        metrics.push(serde_json::to_vec(&a)?);
        metrics.push(serde_json::to_vec(&b)?);
    }
    let abl = |threads| -> std::result::Result<Vec<u8>, Box<dyn std::error::Error>> {
        let mut buf = Vec::new();
        run_ablation(
            &TrainConfig {
                steps: 30,
                ..config.clone()
            },
            &[0, 1],
            threads,
        )?
        .write_csv(&mut buf)?;
        Ok(buf)
    };
    let (abl1, abl2) = (abl(1)?, abl(2)?);
    let ckpt_eq = ckpts[0] == ckpts[1];
    let metrics_eq = metrics[0] == metrics[3] && metrics[1] == metrics[2] && metrics[1] == metrics[4];
    let abl_eq = abl1 == abl2;
    Ok(Outcome {
        passed: ckpt_eq && metrics_eq && abl_eq,
        summary: format!(
            "checkpoint bytes equal {ckpt_eq}, metrics/eval equal {metrics_eq}, ablation csv equal {abl_eq}"
        ),
    })
}

fn main() -> ExitCode {
    let quick = std::env::var("INIT_ACCEPT_QUICK").is_ok_and(|v| v == "1");
    let seed = 0;
    let seeds: Vec<u64> = (0..5).collect();
    let criteria = [
        Criterion {
            id: 1,
            name: "importance sampling estimators",
            budget: Duration::from_secs(10),
            gating: true,
        },
        Criterion {
            id: 2,
            name: "optimal discriminator density ratio",
            budget: Duration::from_secs(120),
            gating: true,
        },
        Criterion {
            id: 3,
            name: "distance statistics bounds and examples",
            budget: Duration::from_secs(5),
            gating: true,
        },
        Criterion {
            id: 4,
            name: "importance weights and detachment",
            budget: Duration::from_secs(5),
            gating: true,
        },
        Criterion {
            id: 5,
            name: "multi-hop reduction and gradient paths",
            budget: Duration::from_secs(30),
            gating: true,
        },
        Criterion {
            id: 6,
            name: "op and loss gradient checks",
            budget: Duration::from_secs(60),
            gating: true,
        },
        Criterion {
            id: 7,
            name: "ablation: AIW+MST vs vanilla",
            budget: Duration::from_secs(3600),
            gating: false,
        },
        Criterion {
            id: 8,
            name: "determinism",
            budget: Duration::from_secs(300),
            gating: true,
        },
        Criterion {
            id: 9,
            name: "metric oracles",
            budget: Duration::from_secs(30),
            gating: true,
        },
    ];

    let mut gate_failed = false;
    for c in &criteria {
        let start = Instant::now();
        let outcome = match c.id {
            1 => from_checks(verify::importance_sampling_checks(seed)),
            2 => from_checks(verify::optimal_discriminator_check(seed)),
            3 => from_checks(verify::distance_stats_checks(seed)),
            4 => from_checks(verify::aiw_checks(seed)),
            5 => from_checks(verify::mst_checks(seed)),
            6 => from_checks(concat(vec![
                verify::op_gradient_checks(seed),
                verify::loss_gradient_checks(seed),
            ])),
            7 => {
                let base = if quick {
                    TrainConfig {
                        steps: 500,
                        ..Default::default()
                    }
                } else {
                    TrainConfig::default()
                };
                match run_ablation(&base, &seeds, thread_cap()) {
                    Ok(table) => {
                        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance_ablation");
                        if let Err(e) = table.write_to(&dir) {
                            eprintln!("could not write ablation table: {e}");
                        }
                        ablation_outcome(&table, &seeds, quick)
                    }
                    Err(e) => Outcome {
                        passed: false,
                        summary: format!("error: {e}"),
                    },
                }
            }
            8 => determinism().unwrap_or_else(|e| Outcome {
                passed: false,
                summary: format!("error: {e}"),
            }),
            9 => from_checks(verify::metric_checks(seed)),
            _ => unreachable!(),
        };
        let elapsed = start.elapsed();
        let in_budget = elapsed <= c.budget;
        let passed = outcome.passed && in_budget;
        if c.gating && !passed {
            gate_failed = true;
        }
        println!(
            "[{}] criterion {}: {} ({:.1}s of {}s budget{}) {}{}",
            if passed { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            elapsed.as_secs_f64(),
            c.budget.as_secs(),
            if in_budget { "" } else { ", over budget" },
            if c.gating { "" } else { "[non-gating] " },
            outcome.summary
        );
    }
    if gate_failed {
        println!("acceptance: FAILED");
        ExitCode::FAILURE
    } else {
        println!("acceptance: all gating criteria passed");
        ExitCode::SUCCESS
    }
}
