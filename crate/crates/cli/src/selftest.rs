//! Finite-difference and invariant suites behind `rspnet selftest`.

use std::io::Write;

use rspnet::analysis::{grad_flow_report, Activation, FlowArch};
use rspnet::attention::{channel_attention, path_scores_var, AttentionMode};
use rspnet::cell::{discretize, CellTopology, NUM_KINDS};
use rspnet::checks::{catalogue, run_case};
use rspnet::metrics::Confusion;
use rspnet::rng::derived;
use rspnet::{Result, Tape64, Tensor64};

/// Largest accepted relative gradient error.
pub const GRAD_TOLERANCE: f64 = 1e-3;
/// Checked entries per gradient case.
pub const ENTRIES: usize = 64;
/// Finite-difference step.
pub const STEP: f64 = 1e-4;

/// Worst error per gradient case over `seeds` seeds starting at `base`.
fn grad_suite(base: u64, seeds: u64, threads: usize) -> Result<Vec<(String, f64)>> {
    let seeds: Vec<u64> = (base..base + seeds).collect();
    let per_thread = seeds.len().div_ceil(threads.max(1)).max(1);
    let results: Vec<Result<Vec<(String, f64)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .chunks(per_thread)
            .map(|chunk| {
                s.spawn(move || {
                    let mut out = Vec::new();
                    for &seed in chunk {
                        for case in catalogue(seed) {
                            let x = case.point::<f32>()?;
                            let r = run_case(&case, &x, STEP, ENTRIES)?;
                            out.push((case.label(), r.max_rel_error));
                        }
                    }
                    Ok(out)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut worst: Vec<(String, f64)> = Vec::new();
    for r in results {
        for (label, e) in r? {
            match worst.iter_mut().find(|(l, _)| *l == label) {
                Some(w) => w.1 = w.1.max(e),
                None => worst.push((label, e)),
            }
        }
    }
    Ok(worst)
}

fn random_features(seed: u64, n: usize, tape: &mut Tape64) -> Result<Vec<rspnet::Var>> {
    let mut rng = derived(seed, 0);
    (0..n)
        .map(|_| Ok(tape.constant(Tensor64::uniform(&[2, 4, 6, 6], -1.0, 1.0, &mut rng)?)))
        .collect()
}

fn attention_rows(seed: u64) -> Result<bool> {
    let mut tape = Tape64::new();
    let f = random_features(seed, 2, &mut tape)?;
    let s = channel_attention(&mut tape, f[0], f[1])?;
    let sum: f64 = tape.value(s).data().iter().sum();
    Ok((sum - 1.0).abs() <= 1e-6)
}

fn literal_degenerate(seed: u64) -> Result<bool> {
    let mut tape = Tape64::new();
    let f = random_features(seed, 3, &mut tape)?;
    let s = path_scores_var(&mut tape, &f, AttentionMode::Literal)?;
    Ok(tape.value(s).data().iter().all(|v| (v - 3.0).abs() <= 1e-4))
}

fn pathnorm_varies(seed: u64) -> Result<bool> {
    let mut tape = Tape64::new();
    let f = random_features(seed, 3, &mut tape)?;
    let s = path_scores_var(&mut tape, &f, AttentionMode::PathNormalized)?;
    let d = tape.value(s).data();
    let spread = d.iter().cloned().fold(f64::MIN, f64::max) - d.iter().cloned().fold(f64::MAX, f64::min);
    Ok(spread > 1e-6)
}

fn discretize_shift(seed: u64) -> Result<bool> {
    use rand::Rng;
    let topo = CellTopology::default();
    let mut rng = derived(seed, 1);
    let values: Vec<f64> = (0..topo.num_edges() * NUM_KINDS)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let shifted: Vec<f64> = values
        .chunks(NUM_KINDS)
        .flat_map(|row| {
            let c = rng.random_range(-5.0..5.0);
            row.iter().map(move |v| v + c).collect::<Vec<_>>()
        })
        .collect();
    Ok(discretize(&values, &topo, 8, false)? == discretize(&shifted, &topo, 8, false)?)
}

fn miou_brute_force(seed: u64) -> Result<bool> {
    use rand::Rng;
    let mut rng = derived(seed, 2);
    let k = 4;
    let pred: Vec<u8> = (0..200).map(|_| rng.random_range(0..k as u8)).collect();
    let truth: Vec<u8> = (0..200)
        .map(|_| {
            if rng.random_bool(0.1) {
                255
            } else {
                rng.random_range(0..k as u8)
            }
        })
        .collect();
    let mut conf = Confusion::new(k)?;
    conf.update(&pred, &truth)?;
    let report = conf.miou()?;
    let mut ious = Vec::new();
    for c in 0..k as u8 {
        let (mut tp, mut fp, mut fnn) = (0u64, 0u64, 0u64);
        for (&p, &t) in pred.iter().zip(&truth) {
            if t == 255 {
                continue;
            }
            match (p == c, t == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fnn += 1,
                _ => {}
            }
        }
        if tp + fp + fnn > 0 {
            ious.push(tp as f64 / (tp + fp + fnn) as f64);
        }
    }
    let mean = ious.iter().sum::<f64>() / ious.len() as f64;
    Ok(mean == report.mean)
}

fn csp_bypass(seed: u64) -> Result<bool> {
    let r = grad_flow_report(6, Activation::Sigmoid, FlowArch::Csp, seed)?;
    Ok(r.bypass_exact == Some(true))
}

/// Run every suite, writing one line per check. Returns the number of
/// failed checks.
pub fn run(base: u64, seeds: u64, threads: usize, out: &mut dyn Write) -> Result<usize> {
    let mut failed = 0;
    let mut line = |ok: bool, text: String| -> Result<()> {
        if !ok {
            failed += 1;
        }
        writeln!(out, "{} {text}", if ok { "ok  " } else { "FAIL" })?;
        Ok(())
    };
    for (label, err) in grad_suite(base, seeds, threads)? {
        line(err <= GRAD_TOLERANCE, format!("grad {label} max_rel_err={err:.3e}"))?;
    }
    type Check = fn(u64) -> Result<bool>;
    let invariants: [(&str, Check); 6] = [
        ("attention rows sum to one", attention_rows),
        ("literal scores degenerate to N", literal_degenerate),
        ("pathnorm scores vary", pathnorm_varies),
        ("discretize ignores row shifts", discretize_shift),
        ("miou matches brute force", miou_brute_force),
        ("csp bypass gradient exact", csp_bypass),
    ];
    for (name, check) in invariants {
        let mut ok = true;
        for seed in base..base + seeds {
            ok &= check(seed)?;
        }
        line(ok, format!("{name} ({seeds} seeds)"))?;
    }
    Ok(failed)
}
