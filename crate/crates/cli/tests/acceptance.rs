//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Criteria 5 and 6 train the desk preset (about four minutes per run on one
//! core) and share their runs.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mhct_core::calibration::{ece, records_from_logits, report_from_records, temperature_scale, CalibrationBin};
use mhct_core::cotrain::{
    check_gradients, cosine_lr, ema_update, peer_pseudo_labels, train, unsupervised_loss, BatchLayout,
    PseudoLabelDecision, TrainOutcome,
};
use mhct_core::data::{make_synthetic_dataset, ChannelStats, SyntheticSpec};
use mhct_core::math::softmax;
use mhct_core::model::images_to_batch;
use mhct_core::{AblationVariant, Image, Logits, ModelConfig, MultiHeadModel, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn line(id: u32, title: &str, outcome: &Outcome, elapsed: Duration) {
    let (status, detail) = match outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {id} {status} [{:.1}s] {title}: {detail}", elapsed.as_secs_f64());
    let _ = out.flush();
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn oracle(row: &[usize], m: usize, classes: usize) -> (usize, bool) {
    let mut counts = vec![0usize; classes];
    for (i, &c) in row.iter().enumerate() {
        if i != m {
            counts[c] += 1;
        }
    }
    let mut best = 0;
    for c in 0..classes {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    (best, 2 * counts[best] > row.len())
}

fn agreement_oracle() -> Outcome {
    let start = Instant::now();
    let classes: usize = 4;
    let (mut cases, mut mismatches) = (0usize, 0usize);
    for heads in 3..=5 {
        let total = classes.pow(heads as u32);
        let rows: Vec<Vec<usize>> = (0..total)
            .map(|mut code| {
                (0..heads)
                    .map(|_| {
                        let c = code % classes;
                        code /= classes;
                        c
                    })
                    .collect()
            })
            .collect();
        let d = peer_pseudo_labels(&rows).map_err(|e| e.to_string())?;
        for (b, row) in rows.iter().enumerate() {
            cases += 1;
            let agree = (0..heads).all(|m| {
                let (class, selected) = oracle(row, m, classes);
                d.selected[b][m] == selected && d.pseudo_class[b][m] == class
            });
            mismatches += usize::from(!agree);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        mismatches == 0 && secs < 10.0,
        format!("{cases} prediction tuples, {mismatches} mismatches, {secs:.3}s"),
    )
}

fn masking_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut unselected, mut leaked, mut selected, mut nonzero) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..500 {
        let (batch, heads, classes) = (rng.random_range(1..40), rng.random_range(1..6), rng.random_range(2..11));
        let logits = Logits {
            batch,
            heads,
            classes,
            data: (0..batch * heads * classes).map(|_| rng.random_range(-6.0..6.0)).collect(),
        };
        let decision = PseudoLabelDecision {
            pseudo_class: (0..batch).map(|_| (0..heads).map(|_| rng.random_range(0..classes)).collect()).collect(),
            selected: (0..batch).map(|_| (0..heads).map(|_| rng.random_bool(0.5)).collect()).collect(),
        };
        let grad = unsupervised_loss(&logits, &decision).map_err(|e| e.to_string())?.grad;
        for b in 0..batch {
            for m in 0..heads {
                let row = grad.get(b, m);
                if decision.selected[b][m] {
                    selected += 1;
                    nonzero += usize::from(row.iter().any(|v| *v != 0.0));
                } else {
                    unselected += 1;
                    leaked += usize::from(row.iter().any(|v| v.to_bits() != 0));
                }
            }
        }
    }
    let rate = nonzero as f64 / selected as f64;
    check(
        leaked == 0 && rate >= 0.99,
        format!("{leaked}/{unselected} unselected rows with a non-zero gradient; {nonzero}/{selected} selected rows non-zero ({:.4})", rate),
    )
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let (heads, classes) = (2, 3);
    let model = MultiHeadModel::build(&ModelConfig::small_cnn(1, heads, classes), 3).map_err(|e| e.to_string())?;
    let params = model.count_parameters().total;
    let set = make_synthetic_dataset(&SyntheticSpec::new(classes, 8, 8, 4)).map_err(|e| e.to_string())?;
    let layout = BatchLayout {
        labeled: 4,
        unlabeled: 4,
        strong_views: heads,
    };
    let images: Vec<&Image> = set.iter().take(layout.rows()).map(|e| &e.image).collect();
    let stats = ChannelStats::compute(images.iter().copied());
    let batch = images_to_batch(images, &stats).map_err(|e| e.to_string())?;
    let labels: Vec<usize> = set[..4].iter().map(|e| e.label).collect();
    let decision = PseudoLabelDecision {
        pseudo_class: (0..4).map(|b| (0..heads).map(|m| (b + 2 * m) % classes).collect()).collect(),
        selected: (0..4).map(|b| (0..heads).map(|m| (b + m) % 3 != 0).collect()).collect(),
    };
    let report = check_gradients(&model, &batch, layout, &labels, 1.0, Some(&decision), 1e-5, 1e-3, 1e-6)
        .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    check(
        params <= 1000 && report.failures.is_empty() && report.checked == params && secs < 300.0,
        format!(
            "{params} parameters, {} outside tolerance, max relative error {:.2e}, max absolute error {:.2e}",
            report.failures.len(),
            report.max_rel_error,
            report.max_abs_error
        ),
    )
}

fn exact_arithmetic() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut expect = |name: &str, got: f64, want: f64, tol: f64| {
        let pass = (got - want).abs() <= tol;
        ok &= pass;
        notes.push(format!("{name}={got:.12}{}", if pass { "" } else { " (wrong)" }));
    };
    let mut s = vec![0.3];
    ema_update(&mut s, &[0.9], 1.0);
    expect("ema(a=1)", s[0], 0.3, 0.0);
    ema_update(&mut s, &[0.9], 0.0);
    expect("ema(a=0)", s[0], 0.9, 0.0);
    let mut s = vec![0.0];
    ema_update(&mut s, &[1.0], 0.999);
    expect("ema(a=0.999)", s[0], 0.001, 1e-15);
    let (base, t) = (0.3, 1000);
    let lr = |i| cosine_lr(base, i, t).unwrap();
    let pi = std::f64::consts::PI;
    expect("lr(0)", lr(0), base, 1e-12);
    expect("lr(T/2)", lr(t / 2), base * (7.0 * pi / 32.0).cos(), 1e-12);
    expect("lr(T)", lr(t), base * (7.0 * pi / 16.0).cos(), 1e-12);
    let bin = |count, acc, conf| CalibrationBin {
        lower: 0.0,
        upper: 1.0,
        count,
        avg_confidence: conf,
        avg_accuracy: acc,
    };
    expect("ece", ece(&[bin(10, 0.8, 0.9), bin(30, 0.6, 0.55)], 40).unwrap(), 0.0625, 1e-9);
    let p = temperature_scale(&[2.0, 0.0], 2.0).unwrap();
    let e = std::f64::consts::E;
    expect("softmax((2,0)/2)", p[0], e / (e + 1.0), 1e-6);
    check(ok, notes.join(", "))
}

struct DeskRuns {
    full: Vec<TrainOutcome>,
    supervised: Vec<TrainOutcome>,
    one_head: Vec<TrainOutcome>,
    one_strong: Vec<TrainOutcome>,
    same_init: Vec<TrainOutcome>,
    efficacy_time: Duration,
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn desk_runs() -> Result<DeskRuns, String> {
    let base = TrainConfig::desk();
    let (train_set, test) = base.dataset.load().map_err(|e| e.to_string())?;
    let run = |edit: &dyn Fn(&mut TrainConfig), seed: u64| -> Result<TrainOutcome, String> {
        let mut config = base.clone();
        config.seed = seed;
        edit(&mut config);
        let config = config.resolved();
        let start = Instant::now();
        let out = train(&config, &train_set, &test, None).map_err(|e| e.to_string())?;
        let mut stdout = std::io::stdout().lock();
        let _ = writeln!(
            stdout,
            "  desk run {:<10} lambda {} seed {seed}: ensemble error {:.2}% ({:.0}s)",
            config.ablation_variant.name(),
            config.lambda_u,
            out.final_record().reported_error(),
            start.elapsed().as_secs_f64()
        );
        Ok(out)
    };
    let variant = |v: AblationVariant| move |c: &mut TrainConfig| c.ablation_variant = v;
    let start = Instant::now();
    let mut full = Vec::new();
    let mut supervised = Vec::new();
    for seed in SEEDS {
        full.push(run(&|_| {}, seed)?);
        supervised.push(run(&|c| c.lambda_u = 0.0, seed)?);
    }
    let efficacy_time = start.elapsed();
    let collect = |v: AblationVariant| SEEDS.iter().map(|&s| run(&variant(v), s)).collect::<Result<Vec<_>, _>>();
    Ok(DeskRuns {
        full,
        supervised,
        one_head: collect(AblationVariant::OneHead)?,
        one_strong: collect(AblationVariant::OneStrong)?,
        same_init: collect(AblationVariant::SameInit)?,
        efficacy_time,
    })
}

fn mean_error(runs: &[TrainOutcome]) -> f64 {
    runs.iter().map(|r| r.final_record().reported_error()).sum::<f64>() / runs.len() as f64
}

fn ssl_efficacy(runs: &DeskRuns) -> Outcome {
    let (full, sup) = (mean_error(&runs.full), mean_error(&runs.supervised));
    let minutes = runs.efficacy_time.as_secs_f64() / 60.0;
    check(
        sup - full >= 5.0 && minutes <= 30.0,
        format!(
            "mean ensemble error {full:.2}% with co-training vs {sup:.2}% supervised-only (gap {:.2} points, need >= 5), {minutes:.1} min for 6 runs",
            sup - full
        ),
    )
}

fn ablation_direction(runs: &DeskRuns) -> Outcome {
    let full = mean_error(&runs.full);
    let one_head = mean_error(&runs.one_head);
    let one_strong = mean_error(&runs.one_strong);
    let same_init = mean_error(&runs.same_init);
    let order = |e: f64| if full <= e { "full <=" } else { "full >" };
    check(
        full <= one_head,
        format!(
            "full {full:.2}% vs one-head {one_head:.2}%; reported only: one-strong {one_strong:.2}% ({} it), same-init {same_init:.2}% ({} it)",
            order(one_strong),
            order(same_init)
        ),
    )
}

fn parameter_counts() -> Outcome {
    let count = |heads| {
        MultiHeadModel::build(&ModelConfig::wrn28(2, heads, 10), 0)
            .map(|m| m.count_parameters().total)
            .map_err(|e| e.to_string())
    };
    let (three, one) = (count(3)?, count(1)?);
    let within = |n: usize, target: f64| (n as f64 / target - 1.0).abs() <= 0.05;
    check(
        within(three, 3.7e6) && within(one, 1.4e6),
        format!("3 heads {three} (target 3.7M), 1 head {one} (target 1.4M)"),
    )
}

fn calibration_pipeline() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, classes) = (10_000, 5);
    let base = Logits {
        batch: n,
        heads: 1,
        classes,
        data: (0..n * classes).map(|_| rng.random_range(-3.0..3.0)).collect(),
    };
    // Labels drawn from the base predictor's own distribution: the base is calibrated.
    let labels: Vec<usize> = (0..n)
        .map(|b| {
            let p = softmax(base.get(b, 0));
            let u: f64 = rng.random();
            let mut acc = 0.0;
            p.iter().position(|q| {
                acc += q;
                u < acc
            })
            .unwrap_or(classes - 1)
        })
        .collect();
    let overconfident = Logits {
        data: base.data.iter().map(|z| z * 2.0).collect(),
        ..base.clone()
    };
    let report = |logits: &Logits, t: f64| {
        let records = records_from_logits(logits, &labels, t).map_err(|e| e.to_string())?;
        report_from_records(&records, 10, Some(t)).map_err(|e| e.to_string())
    };
    let plain = report(&overconfident, 1.0)?;
    let scaled = report(&overconfident, 2.0)?;
    let reference = report(&base, 1.0)?;
    let identical_accuracy = plain.overall_accuracy.to_bits() == scaled.overall_accuracy.to_bits();
    let argmax_stable = records_from_logits(&overconfident, &labels, 1.0)
        .and_then(|a| records_from_logits(&overconfident, &labels, 2.0).map(|b| (a, b)))
        .map(|(a, b)| a.iter().zip(&b).all(|(x, y)| x.predicted_class == y.predicted_class))
        .map_err(|e| e.to_string())?;
    check(
        identical_accuracy && argmax_stable && scaled.ece < plain.ece && (scaled.ece - reference.ece).abs() < 1e-6,
        format!(
            "accuracy {:.4} before and after T=2 on {n} vectors; ECE {:.4} -> {:.4} (calibrated reference {:.4})",
            plain.overall_accuracy, plain.ece, scaled.ece, reference.ece
        ),
    )
}

fn cli_determinism(root: &Path) -> Outcome {
    let run = |name: &str| -> Result<Vec<u8>, String> {
        let out = root.join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_mhct"))
            .args(["train", "--set", "preset=desk", "--set", "total_iterations=40", "--set", "eval_interval=10", "--set", "seed=7"])
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(String::from_utf8_lossy(&status.stderr).into_owned());
        }
        std::fs::read(out.join("metrics.jsonl")).map_err(|e| e.to_string())
    };
    let (a, b) = (run("first")?, run("second")?);
    let lines = a.iter().filter(|&&c| c == b'\n').count();
    check(
        a == b && lines == 5,
        format!("{} and {} byte metrics logs with {lines} records, identical: {}", a.len(), b.len(), a == b),
    )
}

fn timed(f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let start = Instant::now();
    let outcome = f();
    (outcome, start.elapsed())
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut results: Vec<Outcome> = Vec::new();
    let mut report = |id: u32, title: &str, (outcome, elapsed): (Outcome, Duration)| {
        line(id, title, &outcome, elapsed);
        results.push(outcome);
    };
    report(1, "agreement oracle equivalence", timed(agreement_oracle));
    report(2, "masking soundness", timed(masking_soundness));
    report(3, "gradient correctness", timed(gradient_correctness));
    report(4, "exact arithmetic", timed(exact_arithmetic));
    let start = Instant::now();
    match desk_runs() {
        Ok(runs) => {
            report(5, "desk-scale co-training efficacy", (ssl_efficacy(&runs), runs.efficacy_time));
            let rest = start.elapsed() - runs.efficacy_time;
            report(6, "ablation directionality", (ablation_direction(&runs), rest));
        }
        Err(e) => {
            let elapsed = start.elapsed();
            report(5, "desk-scale co-training efficacy", (Err(format!("desk runs failed: {e}")), elapsed));
            report(6, "ablation directionality", (Err(format!("desk runs failed: {e}")), elapsed));
        }
    }
    report(7, "parameter counts", timed(parameter_counts));
    report(8, "calibration pipeline", timed(calibration_pipeline));
    report(9, "determinism", timed(|| cli_determinism(tmp.path())));
    let failed = results.iter().filter(|r| r.is_err()).count();
    let _ = writeln!(std::io::stdout().lock(), "acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
