//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use granular_grasp::config::{ExperimentConfig, TrainingConfig};
use granular_grasp::dataset::{Dataset, GraspRecord};
use granular_grasp::estimators::{train_ee, train_mass, train_rnd, Normalizer};
use granular_grasp::harness::{self, default_targets, run_campaign, stats, EvalCampaign, Evaluator, SuccessTable};
use granular_grasp::nn::{Activation, Mlp};
use granular_grasp::patching::{crop_patch, Patch};
use granular_grasp::rng::derive_seed;
use granular_grasp::selection::{select_index, CandidateEvaluation, PolicyTag, SelectionPolicy};
use granular_grasp::sim::{collect, CollectionState, Simulator};

/// Minimum ratio of mean RND score on unseen vs training patches.
const RND_OOD_RATIO: f64 = 1.2;
/// Minimum advantage of EE and RND over the baseline at size 50.
const SMALL_DATA_MARGIN: f64 = 0.03;
/// Maximum gap between EE/RND and the baseline at size 1000.
const LARGE_DATA_GAP: f64 = 0.10;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// Written straight to stdout so the lines show without --nocapture.
fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

// 1 -------------------------------------------------------------------------

fn loss(net: &Mlp, xs: &[Vec<f64>], ts: &[Vec<f64>]) -> f64 {
    xs.iter()
        .zip(ts)
        .map(|(x, t)| {
            let y = net.forward(x).unwrap();
            0.5 * y.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        })
        .sum()
}

fn gradient_check() -> Outcome {
    let acts = [Activation::Relu, Activation::Identity, Activation::Softplus];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let nets = 30;
    for n in 0..nets {
        let depth = rng.random_range(1..=3);
        let widths: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=8)).collect();
        // Every net mixes tags; the rotation guarantees each tag at every depth.
        let layer_acts: Vec<Activation> = (0..depth).map(|l| acts[(n + l) % 3]).collect();
        let mut net = Mlp::new(&widths, &layer_acts, &mut rng);
        for k in 0..net.num_params() {
            *net.param_mut(k) += rng.random_range(-0.1..0.1);
        }
        let xs: Vec<Vec<f64>> = (0..3).map(|_| (0..widths[0]).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ts: Vec<Vec<f64>> = (0..3).map(|_| (0..widths[depth]).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();

        let mut analytic = vec![0.0; net.num_params()];
        for (x, t) in xs.iter().zip(&ts) {
            let y = net.forward(x).unwrap();
            let g: Vec<f64> = y.iter().zip(t).map(|(a, b)| a - b).collect();
            for (acc, v) in analytic.iter_mut().zip(net.backward(x, &g).unwrap().iter()) {
                *acc += v;
            }
        }
        let h = 1e-5;
        for (k, &a) in analytic.iter().enumerate() {
            let orig = *net.param_mut(k);
            *net.param_mut(k) = orig + h;
            let up = loss(&net, &xs, &ts);
            *net.param_mut(k) = orig - h;
            let down = loss(&net, &xs, &ts);
            *net.param_mut(k) = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    outcome(worst < 1e-4, format!("{nets} nets, {checked} parameters, max relative error {worst:.2e}"))
}

// 2 -------------------------------------------------------------------------

fn oracle(tag: PolicyTag, evals: &[CandidateEvaluation], target: f64, band: f64, draw: usize) -> usize {
    let pos = |i: usize| (evals[i].y, evals[i].x);
    let gap = |i: usize| (evals[i].predicted_mass_g - target).abs();
    // Two passes: find the best key, then the first index (by y, x) holding it.
    let best_of = |idx: &[usize], key: &dyn Fn(usize) -> f64| -> usize {
        let m = idx.iter().map(|&i| key(i)).fold(f64::INFINITY, f64::min);
        *idx.iter().filter(|&&i| key(i) == m).min_by_key(|&&i| pos(i)).unwrap()
    };
    let all: Vec<usize> = (0..evals.len()).collect();
    match tag {
        PolicyTag::Random => draw,
        PolicyTag::Baseline => best_of(&all, &gap),
        PolicyTag::Ee | PolicyTag::Rnd => {
            let band_idx: Vec<usize> = all.iter().copied().filter(|&i| gap(i) <= band).collect();
            if band_idx.is_empty() {
                best_of(&all, &gap)
            } else {
                best_of(&band_idx, &|i| evals[i].uncertainty.unwrap())
            }
        }
    }
}

fn selection_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let sets = 1500;
    let mut mismatches = 0;
    for _ in 0..sets {
        let n = rng.random_range(1..=900);
        let coarse = rng.random_bool(0.5);
        let target = rng.random_range(5.0..60.0f64).round();
        let band = [0.25, 0.5, 1.0, 3.0][rng.random_range(0..4)];
        let mut evals = Vec::with_capacity(n);
        for i in 0..n {
            // Coarse values force ties in both the gap and the uncertainty.
            let m: f64 = if coarse {
                target + rng.random_range(-4..=4) as f64 * 0.5
            } else {
                target + rng.random_range(-10.0..10.0)
            };
            let u: f64 = if coarse { rng.random_range(0..4) as f64 } else { rng.random_range(0.0..5.0) };
            evals.push(CandidateEvaluation { x: i % 45, y: i / 45, predicted_mass_g: m, uncertainty: Some(u) });
        }
        // Shuffle so index order differs from (y, x) order.
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            evals.swap(i, j);
        }
        for tag in PolicyTag::ALL {
            let policy = SelectionPolicy::new(tag, band).unwrap();
            let seed = rng.random::<u64>();
            let got = select_index(&policy, &evals, target, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let draw = ChaCha8Rng::seed_from_u64(seed).random_range(0..n);
            if got != oracle(tag, &evals, target, band, draw) {
                mismatches += 1;
            }
        }
    }
    outcome(mismatches == 0, format!("{sets} candidate sets x 4 policies, {mismatches} mismatches"))
}

// 3 -------------------------------------------------------------------------

fn tiny_campaign_csv() -> Vec<u8> {
    let mut cfg = ExperimentConfig::default();
    cfg.training.hidden = vec![8];
    cfg.training.min_steps = 50;
    cfg.training.min_epochs = 2;
    cfg.training.ee_folds = 2;
    cfg.campaign.sizes = vec![20];
    cfg.campaign.seeds = vec![4];
    cfg.campaign.reference_size = 20;
    cfg.campaign.attempts = 3;
    let campaign = EvalCampaign::from_config(&cfg).unwrap();
    let table = run_campaign(&campaign, &cfg).unwrap();
    let mut buf = Vec::new();
    harness::write_csv(&table, &mut buf).unwrap();
    buf
}

fn conservation_and_determinism() -> Outcome {
    let cfg = ExperimentConfig::default();
    let sim = Simulator::new(&cfg);
    let coffee = cfg.material("coffee").unwrap();
    let mut state = CollectionState::new(&sim, coffee, 5).unwrap();
    let initial = state.total_mass_g();
    let mut drift = 0.0f64;
    for _ in 0..1000 {
        state.step(false).unwrap();
        drift = drift.max((state.total_mass_g() - initial).abs());
    }
    let a = collect(&sim, coffee, 300, 9).unwrap().to_bytes().unwrap();
    let b = collect(&sim, coffee, 300, 9).unwrap().to_bytes().unwrap();
    let csv_a = tiny_campaign_csv();
    let csv_b = tiny_campaign_csv();
    outcome(
        drift <= 1e-6 && a == b && csv_a == csv_b,
        format!(
            "max drift {drift:.2e} g over 1000 cycles (spilled {:.1} g), dataset bytes equal: {}, campaign CSV equal: {}",
            state.spilled_total_g(),
            a == b,
            csv_a == csv_b
        ),
    )
}

// 4 -------------------------------------------------------------------------

fn calibration() -> Outcome {
    let cfg = ExperimentConfig::default();
    let sim = Simulator::new(&cfg);
    let summary = |name: &str| {
        let ds = collect(&sim, cfg.material(name).unwrap(), 1000, 1).unwrap();
        stats::summarize(&ds.masses().collect::<Vec<_>>())
    };
    let c = summary("coffee");
    let r = summary("rice");
    let pass = (20.0..=24.0).contains(&c.mean)
        && (4.0..=6.0).contains(&c.std)
        && c.skew.abs() < 0.5
        && (55.0..=65.0).contains(&r.mean)
        && (12.0..=18.0).contains(&r.std)
        && r.std > c.std;
    outcome(
        pass,
        format!(
            "coffee mean {:.2} std {:.2} skew {:.2}; rice mean {:.2} std {:.2} skew {:.2}",
            c.mean, c.std, c.skew, r.mean, r.std, r.skew
        ),
    )
}

// 5 -------------------------------------------------------------------------

/// Patches from random points of a fresh tray built with `cfg`.
fn fresh_tray_patches(cfg: &ExperimentConfig, n: usize, seed: u64) -> Vec<GraspRecord> {
    let sim = Simulator::new(cfg);
    let m = cfg.material("coffee").unwrap();
    let tray = sim.init_tray(m, sim.default_fill_g(m), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (x, y) = CollectionState::random_point(&sim, &tray, &mut rng);
            GraspRecord { patch: crop_patch(&tray, x, y, cfg.patch_cells).unwrap(), mass_g: 0.0 }
        })
        .collect()
}

fn mean_rnd(pair: &granular_grasp::estimators::RndPair, recs: &[GraspRecord]) -> f64 {
    let ps: Vec<&Patch> = recs.iter().map(|r| &r.patch).collect();
    stats::mean(&pair.uncertainty_batch(&ps).unwrap())
}

fn rnd_ood() -> Outcome {
    let cfg = ExperimentConfig::default();
    // The unseen configuration: a shallow pour with tall, sparse mounds.
    let mut unseen_cfg = cfg.clone();
    unseen_cfg.tray.fill_level_mm = 20.0;
    unseen_cfg.tray.roughness_mm = 30.0;
    unseen_cfg.tray.mound_count = 40;
    let sim = Simulator::new(&cfg);
    let mut ratios = Vec::new();
    for &seed in &SEEDS {
        let train = collect(&sim, cfg.material("coffee").unwrap(), 300, seed).unwrap();
        let norm = Normalizer::fit(&train.records).unwrap();
        let pair = train_rnd(&train, &norm, &cfg.training, seed).unwrap();
        let unseen = fresh_tray_patches(&unseen_cfg, 300, derive_seed(seed, 77));
        ratios.push(mean_rnd(&pair, &unseen) / mean_rnd(&pair, &train.records));
    }
    let ok = ratios.iter().filter(|&&r| r > RND_OOD_RATIO).count();
    outcome(ok == SEEDS.len(), format!("unseen/train ratios {:.2?}, {ok}/5 above {RND_OOD_RATIO}", ratios))
}

// 6 -------------------------------------------------------------------------

/// Smooth random patches whose label follows the mean height; the second
/// population carries a visible marker and heavy label noise.
fn two_population(n: usize, seed: u64) -> (Dataset, Vec<bool>) {
    let side = 11;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    let mut noisy = Vec::with_capacity(n);
    for i in 0..n {
        let is_noisy = i % 2 == 1;
        let level: f32 = rng.random_range(-3.0..3.0);
        let mut data = vec![0.0f32; 2 * side * side];
        for v in &mut data[..side * side] {
            *v = level + rng.random_range(-0.2..0.2);
        }
        for v in &mut data[side * side..] {
            *v = if is_noisy { 0.9 } else { 0.1 } + rng.random_range(-0.05..0.05);
        }
        let noise = if is_noisy { rng.random_range(-6.0..6.0) } else { 0.0 };
        let mass = (20.0 + 2.0 * level as f64 + noise).max(0.0).round();
        records.push(GraspRecord { patch: Patch::from_parts(side, (0, 0), data).unwrap(), mass_g: mass as f32 });
        noisy.push(is_noisy);
    }
    (Dataset { records, material_name: "synthetic".into(), seed }, noisy)
}

fn ee_difficulty() -> Outcome {
    let cfg = TrainingConfig { hidden: vec![32, 16], ..TrainingConfig::default() };
    let mut pairs = Vec::new();
    for &seed in &SEEDS {
        let (ds, noisy) = two_population(400, seed);
        let mass = train_mass(&ds, &cfg, seed).unwrap();
        let ee = train_ee(&ds, &mass, &cfg, seed).unwrap();
        let ps: Vec<&Patch> = ds.records.iter().map(|r| &r.patch).collect();
        let u = ee.uncertainty_batch(&ps).unwrap();
        let pick = |want: bool| -> Vec<f64> { u.iter().zip(&noisy).filter(|p| *p.1 == want).map(|p| *p.0).collect() };
        pairs.push((stats::mean(&pick(true)), stats::mean(&pick(false))));
    }
    let ok = pairs.iter().filter(|(a, b)| a > b).count();
    let shown: Vec<String> = pairs.iter().map(|(a, b)| format!("{a:.2}>{b:.2}")).collect();
    outcome(ok == SEEDS.len(), format!("noisy vs clean mean EE (g): {}; {ok}/5", shown.join(", ")))
}

// 7, 8, 9 -------------------------------------------------------------------

fn trend_campaign() -> SuccessTable {
    let mut cfg = ExperimentConfig::default();
    cfg.campaign.material = "coffee".into();
    cfg.campaign.sizes = vec![50, 1000];
    cfg.campaign.seeds = SEEDS.to_vec();
    cfg.campaign.attempts = 50;
    let campaign = EvalCampaign::from_config(&cfg).unwrap();
    run_campaign(&campaign, &cfg).unwrap()
}

fn rate(t: &SuccessTable, size: usize, p: PolicyTag, tol: f64) -> f64 {
    t.pooled_rate(size, p, tol).unwrap()
}

fn small_data_trend(t: &SuccessTable) -> Outcome {
    let r = |p, tol| rate(t, 50, p, tol);
    let (base, ee, rnd) = (r(PolicyTag::Baseline, 0.10), r(PolicyTag::Ee, 0.10), r(PolicyTag::Rnd, 0.10));
    let beats_random = [0.05, 0.10].iter().all(|&tol| r(PolicyTag::Baseline, tol) > r(PolicyTag::Random, tol));
    let pass = ee >= base + SMALL_DATA_MARGIN && rnd >= base + SMALL_DATA_MARGIN && beats_random;
    outcome(
        pass,
        format!(
            "size 50 @10%: random {:.3} baseline {base:.3} ee {ee:.3} rnd {rnd:.3}; @5%: random {:.3} baseline {:.3}",
            r(PolicyTag::Random, 0.10),
            r(PolicyTag::Random, 0.05),
            r(PolicyTag::Baseline, 0.05)
        ),
    )
}

fn large_data_trend(t: &SuccessTable) -> Outcome {
    let r = |p| rate(t, 1000, p, 0.10);
    let (base, ee, rnd) = (r(PolicyTag::Baseline), r(PolicyTag::Ee), r(PolicyTag::Rnd));
    let pass = (ee - base).abs() <= LARGE_DATA_GAP && (rnd - base).abs() <= LARGE_DATA_GAP;
    outcome(pass, format!("size 1000 @10%: random {:.3} baseline {base:.3} ee {ee:.3} rnd {rnd:.3}", r(PolicyTag::Random)))
}

fn tolerance_monotone(t: &SuccessTable) -> Outcome {
    let rows = t.rows();
    let mut cells = 0;
    let mut violations = 0;
    for lo in rows.iter().filter(|r| r.tol == 0.05) {
        let hi = t.get(lo.size, lo.policy, lo.target_g, 0.10).unwrap();
        cells += 1;
        if hi.rate < lo.rate || hi.attempts != lo.attempts {
            violations += 1;
        }
    }
    outcome(violations == 0 && cells > 0, format!("{cells} cells, {violations} violations"))
}

// 10 ------------------------------------------------------------------------

fn random_policy_check() -> Outcome {
    let cfg = ExperimentConfig::default();
    let sim = Simulator::new(&cfg);
    let coffee = cfg.material("coffee").unwrap();
    let mut sample = Vec::with_capacity(10_000);
    for run in 0..10u64 {
        sample.extend(collect(&sim, coffee, 1000, 1000 + run).unwrap().masses());
    }
    let reference = collect(&sim, coffee, 1000, 1).unwrap();
    let targets = default_targets(&reference, cfg.scale_resolution_g).unwrap();
    let mut ev = Evaluator::new(&cfg, &sim, None, "coffee", 4242, 0).unwrap();
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for &t in &targets {
        let grasped: Vec<f64> =
            (0..1000).map(|_| ev.attempt(&[PolicyTag::Random], t).unwrap()[0].grasped_g).collect();
        for tol in [0.05, 0.10] {
            let hit = |x: &f64| harness::is_success(*x, t, tol).unwrap();
            let expected = sample.iter().filter(|x| hit(x)).count() as f64 / sample.len() as f64;
            let got = grasped.iter().filter(|x| hit(x)).count() as f64 / grasped.len() as f64;
            worst = worst.max((got - expected).abs());
            parts.push(format!("{t}g@{:.0}%: {got:.3} vs {expected:.3}", tol * 100.0));
        }
    }
    outcome(worst <= 0.05, format!("{}; max gap {worst:.3}", parts.join(", ")))
}

#[test]
fn acceptance() {
    let mut failures = Vec::new();
    let mut run = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        emit(&format!("{verdict} {id:>2} {name}: {} [{:.1}s]", o.detail, t.elapsed().as_secs_f64()));
        if !o.pass {
            failures.push(id);
        }
    };
    run(1, "gradient correctness", &mut gradient_check);
    run(2, "selection oracle equivalence", &mut selection_oracle);
    run(3, "conservation and determinism", &mut conservation_and_determinism);
    run(4, "distribution calibration", &mut calibration);
    run(5, "RND out-of-distribution ordering", &mut rnd_ood);
    run(6, "EE difficulty ordering", &mut ee_difficulty);
    let t = Instant::now();
    let table = trend_campaign();
    emit(&format!("     trend campaign (sizes 50 and 1000, 5 seeds) took {:.1}s", t.elapsed().as_secs_f64()));
    run(7, "small-data trend", &mut || small_data_trend(&table));
    run(8, "large-data convergence", &mut || large_data_trend(&table));
    run(9, "tolerance monotonicity", &mut || tolerance_monotone(&table));
    run(10, "random-policy analytic check", &mut random_policy_check);
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
