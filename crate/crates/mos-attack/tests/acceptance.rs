//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line with its measured detail and runtime. Run with
//! `cargo test -p mos-attack --test acceptance -- --nocapture` to see the
//! per-criterion lines.

use mos_attack::attack::{
    apgd_single_observed, checkpoint_schedule, mos_attack_observed, AttackConfig,
};
use mos_attack::classifier::{train_toy, ClassifierWeights, Dataset, LabeledPoint, TrainConfig};
use mos_attack::harness::{
    gradient_cost_probe, run_experiment, AttackSpec, BaseAttackParams, DatasetSpec,
    ExperimentConfig, ModelSpec, ResultsTable,
};
use mos_attack::losses::LossId;
use mos_attack::miner::{
    aggregate_patterns, exhaustive_dominant, extract_patterns, mine_dominant, MinerConfig,
    NormalizedLossMatrix,
};
use mos_attack::numerics::{finite_diff_grad, smooth_max, smooth_min};
use mos_attack::objective::{
    grad_set_objective, loss_matrix, set_objective_exact, set_objective_simplified, LossMatrix,
    PerturbationSet, ScalarizationParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;
use std::time::Instant;

/// Run one criterion body, print its line, and enforce its runtime budget.
fn criterion(tag: &str, runtime_limit_s: f64, body: impl FnOnce() -> Result<String, String>) {
    let started = Instant::now();
    let outcome = body();
    let elapsed = started.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("[acceptance] {tag}: PASS ({detail}) [{elapsed:.2}s]");
            assert!(
                elapsed < runtime_limit_s,
                "{tag}: runtime {elapsed:.2}s exceeds limit {runtime_limit_s}s"
            );
        }
        Err(msg) => {
            println!("[acceptance] {tag}: FAIL ({msg}) [{elapsed:.2}s]");
            panic!("{tag}: {msg}");
        }
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

const MUS: [f64; 3] = [0.1, 1.0, 10.0];

#[test]
fn c01_smoothing_bounds() {
    criterion("C1 smoothing bounds", 1.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let n = rng.random_range(1..=16);
            let xs = rand_vec(&mut rng, n, -10.0, 10.0);
            let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
            for mu in MUS {
                let cap = mu * (n as f64).ln();
                let upper = smooth_max(&xs, mu).map_err(|e| e.to_string())?;
                let lower = smooth_min(&xs, mu).map_err(|e| e.to_string())?;
                let gaps = [
                    upper - max,
                    cap - (upper - max),
                    min - lower,
                    cap - (min - lower),
                ];
                for g in gaps {
                    if g < -1e-9 {
                        return Err(format!("bound violated by {g:e} at n={n}, mu={mu}"));
                    }
                    worst = worst.max((-g).max(0.0));
                }
            }
        }
        Ok(format!("1000 vectors x 3 mus, worst slack {worst:.1e}"))
    });
}

fn rand_matrix(rng: &mut ChaCha8Rng, m: usize, k: usize, lo: f64, hi: f64) -> LossMatrix {
    LossMatrix::from_rows((0..m).map(|_| rand_vec(rng, k, lo, hi)).collect::<Vec<_>>()).unwrap()
}

/// The simplified objective written out literally, with no shifting and no
/// shared code with the implementation: `-mu ln( sum_i 1 / sum_k e^{F/mu} )`.
/// Valid as an oracle while `|F/mu| <= ~700`.
fn simplified_direct_formula(f: &LossMatrix, mu: f64) -> f64 {
    let mut outer = 0.0;
    for i in 0..f.m() {
        let inner: f64 = f.row(i).iter().map(|&v| (v / mu).exp()).sum();
        outer += 1.0 / inner;
    }
    -mu * outer.ln()
}

#[test]
fn c02_objective_identity() {
    criterion("C2 objective identity", 1.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(202);
        let mut worst: f64 = 0.0;
        for trial in 0..1000 {
            let (m, k) = if trial % 4 == 0 {
                (1, 1)
            } else {
                (rng.random_range(1..=6), rng.random_range(1..=6))
            };
            let f = rand_matrix(&mut rng, m, k, -5.0, 5.0);
            let mu = MUS[trial % 3];
            let simplified = set_objective_simplified(&f, mu).map_err(|e| e.to_string())?;
            let composed = {
                let rows: Vec<f64> = (0..m).map(|i| smooth_max(f.row(i), mu).unwrap()).collect();
                smooth_min(&rows, mu).unwrap()
            };
            let direct = simplified_direct_formula(&f, mu);
            for (label, other) in [("composition", composed), ("direct formula", direct)] {
                let diff = (simplified - other).abs();
                worst = worst.max(diff);
                if diff > 1e-12 {
                    return Err(format!(
                        "{label} differs by {diff:e} at m={m} k={k} mu={mu}"
                    ));
                }
            }
            if m == 1 && k == 1 && simplified != f.get(0, 0) {
                return Err(format!(
                    "m=K=1 should be exact: {simplified} vs {}",
                    f.get(0, 0)
                ));
            }
        }
        Ok(format!("1000 matrices, worst identity gap {worst:.1e}"))
    });
}

#[test]
fn c03_sandwich_bound() {
    criterion("C3 sandwich bound", 1.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(303);
        let mut worst: f64 = 0.0;
        for trial in 0..1000 {
            let m = rng.random_range(1..=6);
            let k = rng.random_range(1..=6);
            // Entries in [0, 5]: row maxima are nonnegative.
            let f = rand_matrix(&mut rng, m, k, 0.0, 5.0);
            let mu = MUS[trial % 3];
            let params = ScalarizationParams::uniform(m, mu).unwrap();
            let exact = set_objective_exact(&f, &params).map_err(|e| e.to_string())?;
            let simplified = set_objective_simplified(&f, mu).map_err(|e| e.to_string())?;
            let bound = mu * ((m as f64).ln() + (k as f64).ln());
            let gap = (simplified - exact).abs();
            worst = worst.max(gap - bound);
            if gap > bound + 1e-9 {
                return Err(format!("|simplified-exact|={gap} exceeds {bound}"));
            }
            if simplified < exact - mu * (m as f64).ln() - 1e-9
                || simplified > exact + mu * (k as f64).ln() + 1e-9
            {
                return Err("one-sided sandwich violated".into());
            }
        }
        Ok(format!("1000 matrices, worst slack over bound {worst:.1e}"))
    });
}

fn near_tie(h: &[f64], tol: f64) -> bool {
    let mut s = h.to_vec();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s.windows(2).any(|w| (w[0] - w[1]).abs() < tol)
}

#[test]
fn c04_gradient_fidelity() {
    criterion("C4 gradient fidelity", 30.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let ids = LossId::ALL.to_vec();
        let mut worst: f64 = 0.0;
        for mu in MUS {
            let mut cases = 0;
            while cases < 20 {
                let d = rng.random_range(2..=5);
                let c = rng.random_range(3..=5);
                let dims = vec![d, rng.random_range(4..=10), c];
                let model = ClassifierWeights::seeded_init(&dims, rng.random_range(0..99999))
                    .map_err(|e| e.to_string())?;
                let point = LabeledPoint {
                    x: rand_vec(&mut rng, d, 0.2, 0.8),
                    y: rng.random_range(0..c),
                };
                let k = rng.random_range(1..=4);
                let deltas: Vec<Vec<f64>> =
                    (0..k).map(|_| rand_vec(&mut rng, d, -0.08, 0.08)).collect();
                let set = PerturbationSet::new(deltas.clone()).unwrap();

                // Reject tie neighborhoods in any member's logits.
                let mut tied = false;
                for delta in &deltas {
                    let xk: Vec<f64> = point.x.iter().zip(delta).map(|(a, b)| a + b).collect();
                    if near_tie(&model.forward(&xk).unwrap(), 1e-3) {
                        tied = true;
                    }
                }
                if tied {
                    continue;
                }

                let out = grad_set_objective(&model, &point, &set, &ids, mu)
                    .map_err(|e| e.to_string())?;
                let flat: Vec<f64> = deltas.iter().flatten().cloned().collect();
                let fd = finite_diff_grad(
                    |v| {
                        let ds: Vec<Vec<f64>> = v.chunks(d).map(|c| c.to_vec()).collect();
                        let s = PerturbationSet::new(ds).unwrap();
                        let f = loss_matrix(&model, &point, &s, &ids).unwrap();
                        set_objective_simplified(&f, mu).unwrap()
                    },
                    &flat,
                    1e-6,
                )
                .map_err(|e| e.to_string())?;
                let analytic: Vec<f64> = out.grads.iter().flatten().cloned().collect();
                let scale = fd.iter().map(|v| v.abs()).fold(1e-10, f64::max);
                let rel = analytic
                    .iter()
                    .zip(&fd)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max)
                    / scale;
                worst = worst.max(rel);
                if rel > 1e-4 {
                    return Err(format!("relative error {rel:e} at mu={mu}"));
                }
                cases += 1;
            }
        }
        Ok(format!("60 cases across 3 mus, worst rel err {worst:.1e}"))
    });
}

fn toy_attack_model() -> &'static ClassifierWeights {
    static MODEL: OnceLock<ClassifierWeights> = OnceLock::new();
    MODEL.get_or_init(|| {
        let data = Dataset::gaussian_blobs(77, 600, 2, 3, 0.08);
        let mut cfg = TrainConfig::new(vec![2, 16, 3], 77);
        cfg.epochs = 15;
        train_toy(&cfg, &data, false).unwrap().weights
    })
}

#[test]
fn c05_attack_invariants() {
    criterion("C5 algorithm invariants", 120.0, || {
        let schedule50 = checkpoint_schedule(50);
        if schedule50 != vec![0, 11, 21, 29, 35, 40, 44, 47, 50] {
            return Err(format!("schedule(50) = {schedule50:?}"));
        }
        let schedule100 = checkpoint_schedule(100);
        if schedule100 != vec![0, 22, 41, 57, 70, 80, 87, 93, 99, 100] {
            return Err(format!("schedule(100) = {schedule100:?}"));
        }

        let model = toy_attack_model();
        let mut rng = ChaCha8Rng::seed_from_u64(505);
        let mut worst_slack: f64 = 0.0;
        for run in 0..100 {
            let point = LabeledPoint {
                x: rand_vec(&mut rng, 2, 0.1, 0.9),
                y: rng.random_range(0..3),
            };
            let mut cfg = AttackConfig::new(0.1);
            cfg.k = [1, 2, 5][run % 3];
            cfg.seed = 1000 + run as u64;
            cfg.n_iter = 50;
            let mut feas_violation: f64 = 0.0;
            let out = mos_attack_observed(model, &point, &cfg, None, |obs| {
                for row in &obs.state.x {
                    for (v, x) in row.iter().zip(&point.x) {
                        let lo = (x - cfg.epsilon).max(0.0);
                        let hi = (x + cfg.epsilon).min(1.0);
                        feas_violation = feas_violation.max(lo - v).max(v - hi);
                    }
                }
            })
            .map_err(|e| e.to_string())?;
            worst_slack = worst_slack.max(feas_violation);
            if feas_violation > 1e-12 {
                return Err(format!("run {run}: feasibility slack {feas_violation:e}"));
            }
            let mut prev_best = f64::NEG_INFINITY;
            let mut prev_eta = f64::INFINITY;
            for (i, t) in out.trace.iter().enumerate() {
                if t.objective_best < prev_best {
                    return Err(format!("run {run}: g_max decreased at iterate {i}"));
                }
                prev_best = t.objective_best;
                if i > 0 {
                    if t.eta > prev_eta {
                        return Err(format!("run {run}: eta increased at iterate {i}"));
                    }
                    if t.eta < prev_eta {
                        if t.eta != prev_eta / 2.0 {
                            return Err(format!("run {run}: eta not halved at iterate {i}"));
                        }
                        if !schedule50.contains(&(t.iteration - 1)) {
                            return Err(format!(
                                "run {run}: halving outside checkpoint at iterate {}",
                                t.iteration
                            ));
                        }
                        if t.objective != t.objective_best {
                            return Err(format!(
                                "run {run}: iterate after halving is not the best point"
                            ));
                        }
                    }
                }
                prev_eta = t.eta;
            }
        }
        Ok(format!(
            "100 runs, worst feasibility slack {worst_slack:.1e}"
        ))
    });
}

#[test]
fn c06_apgd_reduction() {
    criterion("C6 single-loss reduction", 60.0, || {
        let model = toy_attack_model();
        let ce = LossId::new(0).unwrap();
        let mut worst: f64 = 0.0;
        for seed in 0..20u64 {
            let point = LabeledPoint {
                x: vec![
                    0.3 + 0.02 * (seed % 5) as f64,
                    0.45 + 0.01 * (seed % 7) as f64,
                ],
                y: (seed % 3) as usize,
            };
            let mut cfg = AttackConfig::new(0.1);
            cfg.losses = vec![ce];
            cfg.k = 1;
            cfg.n_iter = 50;
            cfg.seed = seed;
            cfg.mu = 1.0 + seed as f64 / 10.0;
            let mut set_iterates: Vec<Vec<f64>> = Vec::new();
            let set_run = mos_attack_observed(model, &point, &cfg, None, |obs| {
                set_iterates.push(obs.state.x[0].clone());
            })
            .map_err(|e| e.to_string())?;
            let mut single_iterates: Vec<Vec<f64>> = Vec::new();
            let single_run = apgd_single_observed(model, &point, ce, &cfg, |obs| {
                single_iterates.push(obs.state.x[0].clone());
            })
            .map_err(|e| e.to_string())?;
            if set_iterates.len() != single_iterates.len() {
                return Err(format!(
                    "seed {seed}: trajectory lengths differ: {} vs {}",
                    set_iterates.len(),
                    single_iterates.len()
                ));
            }
            for (a, b) in set_iterates.iter().zip(&single_iterates) {
                for (x, y) in a.iter().zip(b) {
                    let diff = (x - y).abs();
                    worst = worst.max(diff);
                    if diff > 1e-9 {
                        return Err(format!("seed {seed}: trajectories diverged by {diff:e}"));
                    }
                }
            }
            for (a, b) in set_run.trace.iter().zip(&single_run.trace) {
                let diff = (a.objective - b.objective).abs();
                worst = worst.max(diff);
                if diff > 1e-9 {
                    return Err(format!("seed {seed}: objectives diverged by {diff:e}"));
                }
            }
        }
        Ok(format!("20 seeds, worst coordinate gap {worst:.1e}"))
    });
}

/// The seeded desk-scale experiment shared by the two directional criteria:
/// adversarially trained 2-16-3 model, eps = 0.1, 500 evaluation points,
/// 50 iterations, every single-loss baseline, MOS at K in {5, 8}, and the
/// 8-loss x 5-restart ensemble upper bound.
fn desk_experiment() -> &'static ResultsTable {
    static TABLE: OnceLock<ResultsTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let out_dir = std::env::temp_dir().join(format!("mos-acceptance-{}", std::process::id()));
        let mut grid: Vec<AttackSpec> = LossId::ALL
            .iter()
            .map(|&loss| AttackSpec::Single {
                label: None,
                loss,
                restarts: 1,
            })
            .collect();
        grid.push(AttackSpec::Mos {
            label: None,
            k: 5,
            losses: LossId::ALL.to_vec(),
            restarts: 1,
        });
        grid.push(AttackSpec::Mos {
            label: None,
            k: 8,
            losses: LossId::ALL.to_vec(),
            restarts: 1,
        });
        grid.push(AttackSpec::Ensemble {
            label: Some("upper-bound".into()),
            losses: LossId::ALL.to_vec(),
            restarts: 5,
        });
        let cfg = ExperimentConfig {
            dataset: DatasetSpec {
                seed: 7,
                train_points: 1500,
                eval_points: 500,
                dim: 2,
                classes: 3,
                sigma: 0.08,
            },
            model: ModelSpec {
                adversarial: true,
                train_seed: 7,
                ..Default::default()
            },
            attack: BaseAttackParams::new(0.1),
            grid,
            miner: MinerConfig::default(),
            output_dir: out_dir,
            write_traces: false,
            write_loss_matrices: true,
        };
        run_experiment(&cfg).expect("desk experiment").table
    })
}

#[test]
fn c07_directional_set_attack_gain() {
    criterion("C7 directional ASR comparison", 600.0, || {
        let table = desk_experiment();
        let mos5 = table.row("MOS-8(5)").ok_or("missing MOS-8(5)")?.asr_percent;
        let ce = table
            .row("APGD-0(1)")
            .ok_or("missing APGD-0(1)")?
            .asr_percent;
        if mos5 < ce {
            return Err(format!("MOS-8(5) {mos5:.2}% < APGD-CE {ce:.2}%"));
        }
        let best_single = LossId::ALL
            .iter()
            .map(|id| table.row(&format!("APGD-{id}(1)")).unwrap().asr_percent)
            .fold(f64::NEG_INFINITY, f64::max);
        if mos5 < best_single - 2.0 {
            return Err(format!(
                "MOS-8(5) {mos5:.2}% more than 2 points under best single {best_single:.2}%"
            ));
        }
        Ok(format!(
            "MOS-8(5) {mos5:.2}% vs APGD-CE {ce:.2}%, best single {best_single:.2}%"
        ))
    });
}

#[test]
fn c08_upper_bound_gap() {
    criterion("C8 upper-bound gap", 900.0, || {
        let table = desk_experiment();
        let mos8 = table.row("MOS-8(8)").ok_or("missing MOS-8(8)")?.asr_percent;
        let upper = table
            .row("upper-bound")
            .ok_or("missing upper bound")?
            .asr_percent;
        if mos8 < upper - 2.0 {
            return Err(format!(
                "MOS-8(8) {mos8:.2}% more than 2 points under the {upper:.2}% upper bound"
            ));
        }
        Ok(format!("MOS-8(8) {mos8:.2}% vs upper bound {upper:.2}%"))
    });
}

#[test]
fn c09_miner_oracle_agreement() {
    criterion("C9 miner oracle agreement", 60.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(909);
        let default = MinerConfig::default();
        let mut agree = 0;
        for _ in 0..100 {
            let m = rng.random_range(1..=8);
            let k = rng.random_range(1..=8);
            let rows: Vec<Vec<f64>> = (0..m).map(|_| rand_vec(&mut rng, k, 0.0, 1.0)).collect();
            let fbar = NormalizedLossMatrix::from_rows(rows).unwrap();
            let mined = mine_dominant(&fbar, &default).map_err(|e| e.to_string())?;
            let exact = exhaustive_dominant(&fbar, &default).map_err(|e| e.to_string())?;
            if mined == exact {
                agree += 1;
            }
        }
        if agree < 90 {
            return Err(format!("agreement {agree}/100 below 90"));
        }

        // Planted examples at the parameters they were derived with.
        let specialists =
            NormalizedLossMatrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let cfg_a = MinerConfig {
            lambda: 0.5,
            mu: 0.05,
            ..MinerConfig::default()
        };
        let mined = mine_dominant(&specialists, &cfg_a).map_err(|e| e.to_string())?;
        if mined != vec![true, true] || mined != exhaustive_dominant(&specialists, &cfg_a).unwrap()
        {
            return Err(format!(
                "specialist example mined {mined:?}, want [true, true]"
            ));
        }
        let generalists =
            NormalizedLossMatrix::from_rows(vec![vec![1.0, 0.9], vec![0.9, 1.0]]).unwrap();
        let cfg_b = MinerConfig {
            lambda: 1.0,
            mu: 0.05,
            ..MinerConfig::default()
        };
        let mined = mine_dominant(&generalists, &cfg_b).map_err(|e| e.to_string())?;
        let exact = exhaustive_dominant(&generalists, &cfg_b).unwrap();
        if mined.iter().filter(|&&b| b).count() != 1 || mined != exact {
            return Err(format!(
                "generalist example mined {mined:?}, exhaustive {exact:?}"
            ));
        }
        Ok(format!(
            "random agreement {agree}/100; planted examples exact"
        ))
    });
}

#[test]
fn c10_pattern_extraction() {
    criterion("C10 pattern extraction", 1.0, || {
        let cfg = MinerConfig::default(); // T = 0.85, C = 0.75, lambda = 1
        let specialists =
            NormalizedLossMatrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let rec = extract_patterns(&specialists, &[true, true], &cfg).map_err(|e| e.to_string())?;
        if rec.masks != vec![vec![0], vec![1]] {
            return Err(format!("specialist masks {:?}", rec.masks));
        }

        // A generalist column that dominates every row yields the all-losses
        // mask.
        let generalist =
            NormalizedLossMatrix::from_rows(vec![vec![1.0, 0.2], vec![1.0, 0.1], vec![1.0, 0.4]])
                .unwrap();
        let rec2 =
            extract_patterns(&generalist, &[true, false], &cfg).map_err(|e| e.to_string())?;
        if rec2.masks != vec![vec![0, 1, 2]] {
            return Err(format!("generalist masks {:?}", rec2.masks));
        }

        let hist = aggregate_patterns(&[rec, rec2], 3);
        let sum: f64 = hist.patterns.iter().map(|p| p.percent).sum();
        if (sum - 100.0).abs() > 1e-9 {
            return Err(format!("percentages sum to {sum}"));
        }
        Ok(format!(
            "masks as planted; {} patterns summing to 100%",
            hist.patterns.len()
        ))
    });
}

#[test]
fn c11_gradient_cost_probe() {
    criterion("C11 gradient cost", 60.0, || {
        let data = Dataset::gaussian_blobs(5, 300, 64, 3, 0.05);
        let mut cfg = TrainConfig::new(vec![64, 64, 3], 5);
        cfg.epochs = 3;
        let model = train_toy(&cfg, &data, false)
            .map_err(|e| e.to_string())?
            .weights;
        let rows =
            gradient_cost_probe(&model, &[1, 4, 8], &LossId::ALL).map_err(|e| e.to_string())?;
        let mut details = Vec::new();
        for r in &rows {
            if r.ratio > 2.0 {
                return Err(format!("K={} ratio {:.2} exceeds 2.0", r.k, r.ratio));
            }
            details.push(format!("K={} ratio {:.2}", r.k, r.ratio));
        }
        Ok(details.join(", "))
    });
}
