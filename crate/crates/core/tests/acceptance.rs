//! End-to-end acceptance run. Prints one `PASS` or `FAIL` line per
//! criterion followed by a summary line.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use m2ae::augment::AugmentConfig;
use m2ae::losses::{contrastive_loss, recon_loss_cross, LossWeights, View, ViewEmbeddings};
use m2ae::model::{read_checkpoint, sample_mask_plan, write_checkpoint, MaskPlan, ModelConfig, ModelParams};
use m2ae::numeric::Array;
use m2ae::probe::{
    auroc, evaluate_probe, extract_fingerprints, probe_train_subjects, reconstruct_cross, Direction, FinetuneConfig,
    ProbeConfig, Setting, Source, Task,
};
use m2ae::signals::{
    generate_dataset, generate_subject, read_dataset, split_by_subject, write_dataset, Dataset, ProfileOverrides,
    Split, SplitFractions, DEFAULT_FS, DEFAULT_SEGMENT_LEN,
};
use m2ae::training::{
    early_stop_check, gradcheck, metrics_csv, pretrain, reconstruction_mse, scheduler_step, GradcheckConfig,
    SchedulerState, TrainConfig, Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(bool, String), Box<dyn std::error::Error>>;
type Labels = BTreeMap<(u32, u32), f64>;

/// The trained desk model shared by the reconstruction and probe checks.
struct Desk {
    dataset: Dataset,
    best: ModelParams,
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array {
    Array::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn gradient_audit() -> Check {
    let config = GradcheckConfig::default();
    let (m, b) = (config.model, config.batch_size);
    if (m.d_enc, m.enc_depth, b) != (64, 2, 4) || config.tolerance != 1e-4 {
        return Ok((false, format!("audit not at desk dims: d_enc {} depth {} B {b}", m.d_enc, m.enc_depth)));
    }
    let start = Instant::now();
    let report = gradcheck(&config, None)?;
    let elapsed = start.elapsed();
    let params = ModelParams::init_cross_modal(m, 0)?;
    let undersampled =
        report.blocks.iter().filter(|blk| blk.coords < params.get(&blk.name).map_or(0, Array::len).min(50)).count();
    let ok = report.passed()
        && undersampled == 0
        && report.blocks.len() == params.names().count()
        && elapsed.as_secs() < 120;
    Ok((
        ok,
        format!(
            "{} blocks, max rel error {:.2e} (tol 1e-4), {} failing, {undersampled} undersampled, {:.1} s (limit 120 s)",
            report.blocks.len(),
            report.max_rel_error(),
            report.failures().len(),
            elapsed.as_secs_f64()
        ),
    ))
}

fn merge_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut plans = 0usize;
    let mut mismatches = 0usize;
    for k in 1..=8usize {
        for bits in 0u32..(1 << k) {
            let masked: Vec<usize> = (0..k).filter(|i| bits & (1 << i) != 0).collect();
            let plan = MaskPlan::from_masked(k, &masked)?;
            let d = 1 + (bits as usize % 5);
            let z_ecg = random_matrix(&mut rng, k, d);
            let z_ppg = random_matrix(&mut rng, k, d);
            let merged = m2ae::model::merge_bottleneck(&z_ecg, &z_ppg, &plan)?;
            let mut expected = Vec::with_capacity(k * d);
            for i in 0..k {
                let from_ppg = bits & (1 << i) != 0;
                expected.extend_from_slice(if from_ppg { z_ppg.row(i) } else { z_ecg.row(i) });
            }
            if merged.data() != expected.as_slice() {
                mismatches += 1;
            }
            plans += 1;
        }
    }
    Ok((mismatches == 0 && plans == 510, format!("{plans} plans over k = 1..8, {mismatches} mismatches")))
}

fn contrastive_oracle(views: &ViewEmbeddings) -> f64 {
    let b = views.ecg.rows();
    let sim = |v: View, i: usize, u: View, j: usize| -> f64 {
        views.get(v).row(i).iter().zip(views.get(u).row(j)).map(|(x, y)| x * y).sum::<f64>() / views.tau
    };
    let mut total = 0.0;
    for i in 0..b {
        for v in View::ALL {
            let mut denom = Vec::new();
            for j in 0..b {
                for u in View::ALL {
                    if (j, u) != (i, v) {
                        denom.push(sim(v, i, u, j));
                    }
                }
            }
            let max = denom.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + denom.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
            let mut anchor = 0.0;
            for u in View::ALL {
                if u != v {
                    anchor -= sim(v, i, u, i) - lse;
                }
            }
            total += anchor / 3.0;
        }
    }
    total / (4 * b) as f64
}

fn contrastive_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let b = rng.random_range(2..=4);
        let d = rng.random_range(1..=6);
        let tau = rng.random_range(0.05..1.0);
        let views = ViewEmbeddings {
            ecg: random_matrix(&mut rng, b, d),
            ppg: random_matrix(&mut rng, b, d),
            ecg_aug: random_matrix(&mut rng, b, d),
            ppg_aug: random_matrix(&mut rng, b, d),
            tau,
        };
        worst = worst.max((contrastive_loss(&views)? - contrastive_oracle(&views)).abs());
    }
    let mut uniform_worst = 0.0f64;
    for b in 2..=4usize {
        let same = Array::full(&[b, 3], 0.7);
        let views =
            ViewEmbeddings { ecg: same.clone(), ppg: same.clone(), ecg_aug: same.clone(), ppg_aug: same, tau: 0.1 };
        uniform_worst = uniform_worst.max((contrastive_loss(&views)? - ((4 * b - 1) as f64).ln()).abs());
    }
    Ok((
        worst <= 1e-10 && uniform_worst <= 1e-9,
        format!("200 cases max |diff| {worst:.1e} (tol 1e-10), uniform max |diff| {uniform_worst:.1e} (tol 1e-9)"),
    ))
}

fn locality_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut changed = 0usize;
    for _ in 0..200 {
        let k = rng.random_range(2..=12);
        let s = rng.random_range(1..=8);
        let masked: Vec<usize> = loop {
            let m: Vec<usize> = (0..k).filter(|_| rng.random_bool(0.5)).collect();
            if !m.is_empty() && m.len() < k {
                break m;
            }
        };
        let plan = MaskPlan::from_masked(k, &masked)?;
        let [te, re, tp, rp] = [(); 4].map(|_| random_matrix(&mut rng, k, s));
        let base = recon_loss_cross(&te, &re, &tp, &rp, &plan)?;
        let mut re2 = re.clone();
        let mut rp2 = rp.clone();
        for j in 0..s {
            for &i in plan.unmasked() {
                re2.set_flat(i * s + j, rng.random_range(-50.0..50.0))?;
            }
            for &i in plan.masked() {
                rp2.set_flat(i * s + j, rng.random_range(-50.0..50.0))?;
            }
        }
        if recon_loss_cross(&te, &re2, &tp, &rp2, &plan)? != base {
            changed += 1;
        }
    }
    Ok((changed == 0, format!("200 perturbations, {changed} changed the loss")))
}

fn desk_run() -> Result<(Desk, Duration, Vec<f64>), Box<dyn std::error::Error>> {
    let dataset = split_by_subject(&generate_dataset(64, 4, 0)?, SplitFractions::default(), 0)?;
    let train = TrainConfig { seed: 0, ..TrainConfig::default() };
    let start = Instant::now();
    let out =
        pretrain(&dataset, &ModelConfig::default(), &train, &LossWeights::default(), &AugmentConfig::default(), None)?;
    let elapsed = start.elapsed();
    let val: Vec<f64> = out.log.iter().map(|r| r.val_total).collect();
    Ok((Desk { dataset, best: out.best }, elapsed, val))
}

fn overfit_check(desk: &Desk, elapsed: Duration, val: &[f64]) -> Check {
    let first = val[0];
    let best = val.iter().take(30).cloned().fold(f64::INFINITY, f64::min);
    let ratio = best / first;
    let plan = sample_mask_plan(desk.best.config().k(), 0.5, 0)?;
    let (ecg, ppg) = reconstruction_mse(&desk.best, &desk.dataset, &desk.dataset.indices_in(Split::Train), &plan)?;
    let ok = ratio <= 0.6 && ecg < 0.1 && ppg < 0.1 && elapsed.as_secs() < 600;
    Ok((
        ok,
        format!(
            "{} epochs, best val / epoch-1 val = {ratio:.3} (limit 0.6), train masked MSE ecg {ecg:.3} ppg {ppg:.3} \
             (limit 0.1), {:.0} s (limit 600 s)",
            val.len(),
            elapsed.as_secs_f64()
        ),
    ))
}

fn finetune_direction_check(desk: &Desk) -> Check {
    let train = desk.dataset.subset(Split::Train);
    let test = desk.dataset.subset(Split::Test);
    let cfg = FinetuneConfig::default();
    let mut ok = true;
    let mut parts = Vec::new();
    for direction in [Direction::EcgToPpg, Direction::PpgToEcg] {
        let frozen = reconstruct_cross(&desk.best, &test.pairs, direction, Setting::Frozen, None)?.mae;
        let tuned = reconstruct_cross(
            &desk.best,
            &test.pairs,
            direction,
            Setting::DecoderFinetune,
            Some((&train.pairs, &cfg)),
        )?
        .mae;
        ok &= tuned <= frozen;
        parts.push(format!("{direction}: finetune {tuned:.4} vs frozen {frozen:.4}"));
    }
    Ok((ok, format!("{} held-out pairs; {}", test.len(), parts.join(", "))))
}

fn heart_rate_dataset() -> Result<(Dataset, Labels), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let per_class = 32u32;
    let pairs = 4u32;
    let mut profiles = Vec::new();
    let mut class_of = BTreeMap::new();
    for id in 0..2 * per_class {
        let class = id % 2;
        let band = if class == 0 { 55.0..=65.0 } else { 95.0..=105.0 };
        let overrides =
            ProfileOverrides { heart_rate_bpm: Some(rng.random_range(band)), ..ProfileOverrides::default() };
        profiles.push((id, generate_subject(rng.random(), &overrides)));
        class_of.insert(id, f64::from(class));
    }
    let dataset = Dataset::from_profiles(&profiles, pairs, DEFAULT_SEGMENT_LEN, DEFAULT_FS)?;
    let labels =
        dataset.pairs.iter().map(|p| ((p.subject_id(), p.segment_index()), class_of[&p.subject_id()])).collect();
    Ok((dataset, labels))
}

fn representation_check(desk: &Desk) -> Check {
    let (dataset, labels) = heart_rate_dataset()?;
    let mut ok = true;
    let mut parts = Vec::new();
    for source in [Source::Ecg, Source::Ppg, Source::Paired] {
        let set = extract_fingerprints(&desk.best, &dataset.pairs, source)?;
        let train: BTreeSet<u32> = probe_train_subjects(&set, 0.3, 0)?;
        let outcome = evaluate_probe(&set, &labels, &train, Task::Binary, &ProbeConfig::default())?;
        let acc = outcome.test.get("accuracy").unwrap_or(f64::NAN);
        ok &= acc >= 0.8;
        parts.push(format!("{source} {acc:.3}"));
    }
    Ok((ok, format!("held-out accuracy (limit 0.8): {}", parts.join(", "))))
}

fn schedule_check() -> Check {
    let losses = [1.0, 0.9, 0.95, 0.97, 0.96, 0.85, 0.85, 0.85, 0.85, 0.84];
    let expected = [1e-4, 1e-4, 1e-4, 5e-5, 5e-5, 5e-5, 5e-5, 2.5e-5, 2.5e-5, 2.5e-5];
    let mut state = SchedulerState::new(1e-4, 0.5, 2);
    let mut rates = Vec::new();
    for &l in &losses {
        state = scheduler_step(&state, l);
        rates.push(state.lr);
    }
    let scheduler_ok = rates == expected;

    let mut stop_ok = !early_stop_check(&[1.0, 1.0, 1.0, 1.0, 1.0], 5)
        && early_stop_check(&[1.0, 1.0, 1.0, 1.0, 1.0, 1.0], 5)
        && !early_stop_check(&[5.0, 4.0, 3.0, 2.0, 1.0, 0.5, 0.25], 5)
        && early_stop_check(&[1.0, 1.5, 1.0], 2)
        && !early_stop_check(&[1.0, 1.5, 0.99], 2);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..2000 {
        let n = rng.random_range(1..=12);
        let history: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..4u8))).collect();
        let patience = rng.random_range(1..=5);
        let min = history.iter().cloned().fold(f64::INFINITY, f64::min);
        let first_min = history.iter().position(|&v| v == min).unwrap();
        stop_ok &= early_stop_check(&history, patience) == (n - 1 - first_min >= patience);
    }
    Ok((
        scheduler_ok && stop_ok,
        format!("learning rates {rates:?}; early-stop sequences and 2000 random histories match: {stop_ok}"),
    ))
}

fn metric_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut cases = 0usize;
    let mut worst = 0.0f64;
    for n in 2..=12usize {
        for bits in 1u32..(1 << n) - 1 {
            let labels: Vec<bool> = (0..n).map(|i| bits & (1 << i) != 0).collect();
            let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..6u8)) / 5.0).collect();
            let (mut concordant, mut pairs) = (0.0, 0.0);
            for p in (0..n).filter(|&i| labels[i]) {
                for q in (0..n).filter(|&i| !labels[i]) {
                    pairs += 1.0;
                    concordant += if scores[p] > scores[q] {
                        1.0
                    } else if scores[p] == scores[q] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
            worst = worst.max((auroc(&scores, &labels)? - concordant / pairs).abs());
            cases += 1;
        }
    }
    let example = auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true])?;
    Ok((
        worst <= 1e-12 && (example - 0.75).abs() <= 1e-12,
        format!("{cases} labelings over n = 2..12, max |diff| {worst:.1e}; worked example {example}"),
    ))
}

fn determinism_check() -> Check {
    let dataset = split_by_subject(&generate_dataset(20, 2, 5)?, SplitFractions::default(), 5)?;
    let model = ModelConfig { d_enc: 16, enc_depth: 1, dec_width: 8, dec_depth: 1, heads: 2, ..ModelConfig::default() };
    let train = TrainConfig { batch_size: 4, max_epochs: 3, seed: 11, ..TrainConfig::default() };
    let run = || -> Result<(String, Vec<u8>), Box<dyn std::error::Error>> {
        let params = ModelParams::init_cross_modal(model, train.seed)?;
        let mut trainer = Trainer::new(&dataset, params, train, LossWeights::default(), AugmentConfig::default())?;
        let out = trainer.run(None)?;
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &trainer.checkpoint())?;
        Ok((metrics_csv(&out.log), bytes))
    };
    let (log_a, ckpt_a) = run()?;
    let (log_b, ckpt_b) = run()?;
    let logs_equal = log_a == log_b;

    let back = read_checkpoint(ckpt_a.as_slice())?;
    let mut again = Vec::new();
    write_checkpoint(&mut again, &back)?;
    let checkpoint_ok = again == ckpt_a && ckpt_a == ckpt_b;

    let mut ds_bytes = Vec::new();
    write_dataset(&mut ds_bytes, &dataset)?;
    let ds_back = read_dataset(ds_bytes.as_slice())?;
    let mut ds_again = Vec::new();
    write_dataset(&mut ds_again, &ds_back)?;
    let dataset_ok = ds_again == ds_bytes && ds_back.pairs == dataset.pairs;

    Ok((
        logs_equal && checkpoint_ok && dataset_ok,
        format!(
            "training logs identical: {logs_equal}; checkpoint round trip ({} bytes): {checkpoint_ok}; \
             dataset round trip ({} bytes): {dataset_ok}",
            ckpt_a.len(),
            ds_bytes.len()
        ),
    ))
}

fn report(id: usize, name: &str, check: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(check));
    let (pass, detail) = match outcome {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => (false, format!("error: {e}")),
        Err(_) => (false, "panicked".to_string()),
    };
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("{verdict} [{id:>2}] {name}: {detail} ({:.1} s)", start.elapsed().as_secs_f64());
    pass
}

fn main() {
    let mut passed = 0;
    passed += usize::from(report(1, "gradient audit", gradient_audit));
    passed += usize::from(report(2, "bottleneck merge oracle", merge_oracle));
    passed += usize::from(report(3, "contrastive loss oracle", contrastive_check));
    passed += usize::from(report(4, "reconstruction loss locality", locality_check));

    let desk = catch_unwind(desk_run).map_err(|_| "panicked".to_string()).and_then(|r| r.map_err(|e| e.to_string()));
    match &desk {
        Ok((d, elapsed, val)) => {
            passed += usize::from(report(5, "overfit smoke test", || overfit_check(d, *elapsed, val)));
            passed += usize::from(report(6, "decoder finetune direction", || finetune_direction_check(d)));
            passed += usize::from(report(7, "heart-rate linear probe", || representation_check(d)));
        }
        Err(e) => {
            for (id, name) in
                [(5, "overfit smoke test"), (6, "decoder finetune direction"), (7, "heart-rate linear probe")]
            {
                println!("FAIL [{id:>2}] {name}: desk pretraining failed: {e}");
            }
        }
    }

    passed += usize::from(report(8, "scheduler and early stopping", schedule_check));
    passed += usize::from(report(9, "AUROC oracle", metric_check));
    passed += usize::from(report(10, "determinism and round trips", determinism_check));
    println!("{passed}/10 criteria passed");
}
