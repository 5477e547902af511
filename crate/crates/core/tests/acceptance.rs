//! Acceptance criteria, one PASS/FAIL line each. Runs as a plain binary so
//! the summary is printed even when every criterion passes.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::{bank, clustered, column_moments, gaussian, loss_grad_check, oracle_knn, oracle_recall, prefix_violations, set, LossFixture};
use pathryoshka::checkpoint::Archive;
use pathryoshka::dataset::synthetic_tile_dataset;
use pathryoshka::eval::{eval_image, knn_classify, knn_predict, knn_runtime_profile, projected_cls_cosine, retrieval_recall, EmbeddingSet};
use pathryoshka::experiment::{run_crop_ablation, run_nesting_ablation, DataSource, DatasetSection, ExperimentConfig, ModelSection, SyntheticData};
use pathryoshka::heads::{nesting_levels, TeacherDim};
use pathryoshka::loss::{patch_loss, StudentTokens, TeacherTokens};
use pathryoshka::model::{build_student, deployed_cost, BackboneConfig};
use pathryoshka::nn::Parameters;
use pathryoshka::optim::cosine_schedule;
use pathryoshka::teacher::{make_synthetic_teacher, standardize_batch, TeacherRegistry, TeacherSpec};
use pathryoshka::trainer::{export_deployed, load_backbone, TrainConfig, TrainState, Trainer};

const PREFIX_TRIALS: usize = 100;
const GRAD_SLICES: usize = 10;
const GRAD_REL_TOL: f64 = 1e-4;
const STD_MEAN_TOL: f64 = 1e-5;
const STD_UNIT_TOL: f64 = 1e-4;
const AFFINE_REL_TOL: f64 = 1e-5;
const B_PARAMS: f64 = 87e6;
const B_PARAMS_TOL: f64 = 0.02;
const B_FLOPS: f64 = 44.6e9;
const S_PARAMS: f64 = 22e6;
const S_PARAMS_TOL: f64 = 0.05;
const S_FLOPS: f64 = 11.05e9;
const FLOPS_TOL: f64 = 0.10;
const CONVERGENCE_STEPS: u64 = 2000;
const CONVERGENCE_BATCH: usize = 64;
const MIN_HELDOUT_COSINE: f64 = 0.8;
const MIN_COSINE_GAIN: f64 = 0.5;
const MAX_LOSS_RATIO: f64 = 0.25;
const ABLATION_STEPS: u64 = 400;
const ABLATION_BATCH: usize = 32;
const RUNTIME_N: usize = 10_000;
const RUNTIME_HALF_RATIO: (f64, f64) = (1.4, 2.8);
const RUNTIME_MIN_RATIO: f64 = 5.0;
const DETERMINISM_STEPS: usize = 10;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_nesting_levels() -> Outcome {
    let l = nesting_levels(768, 5).map_err(|e| e.to_string())?;
    check(l.levels() == [768, 384, 192, 96, 48], format!("{:?}", l.levels()))
}

fn c2_prefix_contract() -> Outcome {
    let b = bank(96, 5, &[16, 24, 32], 17);
    let heads = b.num_heads();
    let bad = prefix_violations(&b, 2, PREFIX_TRIALS, 23);
    check(heads == 30 && bad == 0, format!("{heads} heads, {PREFIX_TRIALS} perturbations per (teacher, level), {bad} changed outputs"))
}

fn c3_grad_check() -> Outcome {
    let mut fx = LossFixture::new(32, 5, &[8, 12, 16], 3, 9, 2024);
    let worst = loss_grad_check(&mut fx, GRAD_SLICES, 99);
    check(worst < GRAD_REL_TOL, format!("max relative error {worst:.2e} over {GRAD_SLICES} slices (f64)"))
}

fn c4_standardization() -> Outcome {
    let dim = 16;
    let (mut worst_mean, mut worst_std) = (0.0f64, 0.0f64);
    for seed in 0..5 {
        let scales = gaussian(dim, 100 + seed);
        let raw: Vec<f64> = gaussian(256 * dim, seed)
            .iter()
            .enumerate()
            .map(|(k, v)| v * (0.1 + 5.0 * scales[k % dim].abs()) + 20.0 * scales[k % dim])
            .collect();
        let (mean, std) = column_moments(&standardize_batch(&raw, dim), dim);
        worst_mean = mean.iter().fold(worst_mean, |a, m| a.max(m.abs()));
        worst_std = std.iter().fold(worst_std, |a, s| a.max((s - 1.0).abs()));
    }
    let fx = LossFixture::new(24, 3, &[16], 4, 16, 5);
    let value = |tp: &[f64]| {
        let s = StudentTokens { batch: fx.batch, cls: &fx.cls_a, patches: Some(&fx.patches) };
        patch_loss(&fx.bank, &s, &[TeacherTokens { name: "t0", cls: &fx.t_cls_a[0], patches: Some(tp) }]).unwrap().0
    };
    let scale = gaussian(16, 7);
    let shift = gaussian(16, 8);
    let moved: Vec<f64> = fx.t_patches[0]
        .iter()
        .enumerate()
        .map(|(k, v)| v * (0.2 + 4.0 * scale[k % 16].abs()) + 10.0 * shift[k % 16])
        .collect();
    let base = value(&fx.t_patches[0]);
    let rel = (value(&moved) - base).abs() / base;
    check(
        worst_mean < STD_MEAN_TOL && worst_std < STD_UNIT_TOL && rel < AFFINE_REL_TOL,
        format!("max |mean| {worst_mean:.1e}, max |std-1| {worst_std:.1e}, affine relative change {rel:.1e}"),
    )
}

fn c5_schedules() -> Outcome {
    let c = TrainConfig::default();
    let last = c.total_steps - 1;
    let got = [c.lr_at(0), c.lr_at(last), c.wd_at(0), c.wd_at(last), c.ema_at(0), c.ema_at(last)];
    let want = [1e-4, 1e-5, 0.01, 0.02, 0.994, 1.0];
    let raw = [cosine_schedule(1e-4, 1e-5, 0, 300_000), cosine_schedule(1e-4, 1e-5, 300_000, 300_000)];
    check(got == want && raw == [1e-4, 1e-5], format!("lr/wd/ema at first and last update {got:?}"))
}

fn c6_costs() -> Outcome {
    let cost = |p: &str| deployed_cost(&BackboneConfig::preset(p).unwrap(), 224).unwrap();
    let (b, s) = (cost("B"), cost("S"));
    let within = |v: f64, target: f64, tol: f64| (v - target).abs() <= tol * target;
    let tiny = BackboneConfig::preset("tiny").unwrap();
    let teachers: Vec<TeacherDim> = (0..2).map(|i| TeacherDim { name: format!("t{i}"), dim: 64 }).collect();
    let state = TrainState::new(&tiny, &teachers, &TrainConfig { seed: 3, ..TrainConfig::default() }).map_err(|e| e.to_string())?;
    let deploy = export_deployed(&state.to_archive().map_err(|e| e.to_string())?, true).map_err(|e| e.to_string())?;
    let deployed = load_backbone(&deploy).map_err(|e| e.to_string())?;
    let bare = build_student::<f32>(&tiny, 0).map_err(|e| e.to_string())?;
    let mut bare_archive = Archive::new();
    bare.store(&mut bare_archive, "backbone").map_err(|e| e.to_string())?;
    let ok = within(b.params as f64, B_PARAMS, B_PARAMS_TOL)
        && within(b.flops as f64, B_FLOPS, FLOPS_TOL)
        && within(s.params as f64, S_PARAMS, S_PARAMS_TOL)
        && within(s.flops as f64, S_FLOPS, FLOPS_TOL)
        && deployed.num_params() == bare.num_params()
        && deploy.count_prefix("") == bare_archive.count_prefix("");
    check(
        ok,
        format!(
            "B {:.2}M params {:.2} GFLOPs; S {:.2}M params {:.2} GFLOPs; deploy {} params vs bare {}",
            b.params as f64 / 1e6,
            b.flops as f64 / 1e9,
            s.params as f64 / 1e6,
            s.flops as f64 / 1e9,
            deployed.num_params(),
            bare.num_params()
        ),
    )
}

fn synthetic_specs(dim: usize) -> Vec<TeacherSpec> {
    (1..=2)
        .map(|s| {
            let mut t = make_synthetic_teacher(s, dim, 16).unwrap();
            t.name = format!("t{s}");
            t
        })
        .collect()
}

fn c7_convergence() -> Outcome {
    let data = synthetic_tile_dataset(7, 4, 64, 256).map_err(|e| e.to_string())?;
    let held = synthetic_tile_dataset(8, 4, 8, 256).map_err(|e| e.to_string())?;
    let specs = synthetic_specs(64);
    let teachers = TeacherRegistry::default().load_all(&specs).map_err(|e| e.to_string())?;
    let dims: Vec<TeacherDim> = specs.iter().map(|s| TeacherDim { name: s.name.clone(), dim: s.dim }).collect();
    let cfg = TrainConfig {
        total_steps: CONVERGENCE_STEPS,
        batch_size: CONVERGENCE_BATCH,
        seed: 1,
        ..TrainConfig::default()
    };
    let state = TrainState::new(&BackboneConfig::preset("tiny").unwrap(), &dims, &cfg).map_err(|e| e.to_string())?;
    let images: Vec<_> = held.records.iter().map(|r| eval_image(&r.load().unwrap())).collect();
    let before = projected_cls_cosine(&state.student, &state.heads, &teachers, &images).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(cfg, state, &data, &teachers).map_err(|e| e.to_string())?;
    let mut first = f64::NAN;
    let mut last = f64::NAN;
    for _ in 0..CONVERGENCE_STEPS {
        let r = trainer.step().map_err(|e| e.to_string())?;
        if r.step == 1 {
            first = r.loss.total;
        }
        last = r.loss.total;
        if r.step % 250 == 0 {
            eprintln!("C7 step {} loss {:.4}", r.step, r.loss.total);
        }
    }
    let after = projected_cls_cosine(&trainer.state.student, &trainer.state.heads, &teachers, &images).map_err(|e| e.to_string())?;
    let min_after = after.iter().map(|c| c.mean).fold(f64::INFINITY, f64::min);
    let min_gain = after.iter().zip(&before).map(|(a, b)| a.mean - b.mean).fold(f64::INFINITY, f64::min);
    let levels: Vec<String> = after.iter().map(|c| format!("{}@{}={:.3}", c.teacher, c.level, c.mean)).collect();
    check(
        min_after >= MIN_HELDOUT_COSINE && min_gain >= MIN_COSINE_GAIN && last < MAX_LOSS_RATIO * first,
        format!(
            "min held-out cosine {min_after:.3}, min gain {min_gain:.3}, loss {first:.3} -> {last:.3} (ratio {:.3}); {}",
            last / first,
            levels.join(" ")
        ),
    )
}

fn ablation_config(dir: &std::path::Path, steps: u64, batch: usize) -> ExperimentConfig {
    ExperimentConfig {
        output_dir: dir.to_path_buf(),
        dataset: DatasetSection {
            train: DataSource {
                synthetic: Some(SyntheticData { seed: 7, classes: 4, per_class: 32, size: 256 }),
                ..DataSource::default()
            },
            eval: None,
            test_every: 5,
        },
        model: ModelSection { preset: Some("tiny".into()), backbone: None },
        teachers: synthetic_specs(64),
        train: TrainConfig { total_steps: steps, batch_size: batch, seed: 4, ..TrainConfig::default() },
        eval: Default::default(),
    }
}

fn c8_nesting_benefit() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = ablation_config(dir.path(), ABLATION_STEPS, ABLATION_BATCH);
    cfg.validate().map_err(|e| e.to_string())?;
    let out = run_nesting_ablation(&cfg, &TeacherRegistry::default(), "acceptance").map_err(|e| e.to_string())?;
    let (nested, single) = out.drop_to(96 / 16).ok_or("d/16 not evaluated")?;
    check(
        nested <= single,
        format!(
            "accuracy drop d->d/16: nested {nested:.3}, single {single:.3}; nested {:?}, single {:?}",
            out.nested.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>(),
            out.single.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>()
        ),
    )
}

fn c9_oracles() -> Outcome {
    let mut cases = 0;
    let mut mismatches = 0;
    for (seed, n_train, n_test, d) in [(1u64, 60usize, 40usize, 16usize), (2, 80, 20, 8), (3, 30, 30, 12)] {
        let (rows, labels) = clustered(seed, n_train + n_test, d, 4, 1.5);
        let (tr, te) = (set(&rows[..n_train], &labels[..n_train]), set(&rows[n_train..], &labels[n_train..]));
        let all: EmbeddingSet = set(&rows, &labels);
        let ids: Vec<String> = all.source_ids.clone();
        for m in 1..=d {
            for k in [1, 5, 10] {
                cases += 1;
                let want = oracle_knn(&rows[..n_train], &labels[..n_train], &rows[n_train..], k, m);
                let got = knn_predict(&tr, &te, k, m).unwrap();
                let acc = knn_classify(&tr, &te, k, m).unwrap();
                let oracle_acc = want.iter().zip(&labels[n_train..]).filter(|(p, y)| p == y).count() as f64 / n_test as f64;
                let r = retrieval_recall(&all, &all, k, m).unwrap();
                let oracle_r = oracle_recall(&rows, &labels, &ids, &rows, &labels, &ids, k, m);
                if got != want || acc != oracle_acc || r != oracle_r {
                    mismatches += 1;
                }
            }
        }
    }
    check(mismatches == 0, format!("{cases} (fixture, m, K) cases, {mismatches} mismatches"))
}

fn c10_runtime() -> Outcome {
    let rows = knn_runtime_profile(RUNTIME_N, &[768, 384, 12], 10, 3, 0).map_err(|e| e.to_string())?;
    let (full, half, tiny) = (rows[0].mean_seconds, rows[1].mean_seconds, rows[2].mean_seconds);
    let (r_half, r_min) = (full / half, full / tiny);
    check(
        (RUNTIME_HALF_RATIO.0..=RUNTIME_HALF_RATIO.1).contains(&r_half) && r_min >= RUNTIME_MIN_RATIO,
        format!("N={RUNTIME_N}: 768 {full:.3}s, 384 {half:.3}s, 12 {tiny:.3}s; ratios {r_half:.2} and {r_min:.1}"),
    )
}

fn c11_crop_ablation() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = ablation_config(dir.path(), 4, 8);
    let out = run_crop_ablation(&cfg, &TeacherRegistry::default(), "acceptance").map_err(|e| e.to_string())?;
    let csv = std::fs::read_to_string(&out.csv).map_err(|e| e.to_string())?;
    let zero = out.no_crop.records.iter().all(|r| r.loss.cls_nonaligned == 0.0);
    let active = out.crop.records.iter().all(|r| r.loss.cls_nonaligned > 0.0);
    check(
        csv.starts_with("metric,crop,no_crop\n") && zero && active && out.rows.len() >= 5,
        format!("{} rows in {}; no-crop non-aligned term identically 0: {zero}", out.rows.len(), out.csv.file_name().unwrap().to_string_lossy()),
    )
}

fn c12_determinism() -> Outcome {
    let data = synthetic_tile_dataset(3, 4, 8, 256).map_err(|e| e.to_string())?;
    let specs = synthetic_specs(64);
    let teachers = TeacherRegistry::default().load_all(&specs).map_err(|e| e.to_string())?;
    let dims: Vec<TeacherDim> = specs.iter().map(|s| TeacherDim { name: s.name.clone(), dim: s.dim }).collect();
    let cfg = TrainConfig { total_steps: 100, batch_size: 8, seed: 12, ..TrainConfig::default() };
    let fresh = || TrainState::new(&BackboneConfig::preset("tiny").unwrap(), &dims, &cfg).unwrap();
    let run = |state: TrainState, steps: usize| {
        let mut t = Trainer::new(cfg.clone(), state, &data, &teachers).unwrap();
        let recs: Vec<_> = (0..steps).map(|_| t.step().unwrap()).collect();
        (recs, t.state)
    };
    let (a, _) = run(fresh(), DETERMINISM_STEPS + 1);
    let (b, _) = run(fresh(), DETERMINISM_STEPS + 1);
    let same_stream = a.iter().zip(&b).all(|(x, y)| x.loss == y.loss);

    let (_, mid) = run(fresh(), 5);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("mid.safetensors");
    mid.save(&path).map_err(|e| e.to_string())?;
    let (next, after) = run(TrainState::load(&path).map_err(|e| e.to_string())?, 1);
    let (_, reference) = run(fresh(), 6);
    let resumed = next[0] == a[5] && after == reference;
    check(
        same_stream && resumed,
        format!("{} identical LossReports across reruns: {same_stream}; resume at step 6 identical: {resumed}", a.len()),
    )
}

fn main() -> ExitCode {
    let only: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with('C')).collect();
    let criteria: [(&str, &str, fn() -> Outcome); 12] = [
        ("C1", "nesting levels", c1_nesting_levels),
        ("C2", "prefix contract", c2_prefix_contract),
        ("C3", "loss gradient check", c3_grad_check),
        ("C4", "patch standardization", c4_standardization),
        ("C5", "schedules", c5_schedules),
        ("C6", "cost accounting", c6_costs),
        ("C7", "desk-scale convergence", c7_convergence),
        ("C8", "nesting benefit ablation", c8_nesting_benefit),
        ("C9", "k-NN oracle equivalence", c9_oracles),
        ("C10", "runtime linearity", c10_runtime),
        ("C11", "cropping ablation harness", c11_crop_ablation),
        ("C12", "determinism and resume", c12_determinism),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == id) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("{id} PASS {name} ({secs:.1}s): {d}"),
            Err(d) => {
                failed += 1;
                println!("{id} FAIL {name} ({secs:.1}s): {d}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
