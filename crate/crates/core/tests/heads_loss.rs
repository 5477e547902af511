mod common;

use common::{bank, column_moments, gaussian, loss_grad_check, prefix_violations, LossFixture};
use pathryoshka::heads::{nesting_levels, project_cls, HeadKind, NestingLevels};
use pathryoshka::loss::{cls_loss, cosine_loss, patch_loss, total_loss, LossWeights, StudentTokens, TeacherTokens};
use pathryoshka::nn::Parameters;
use pathryoshka::teacher::{standardize_batch, standardize_patch_tokens, StandardizationStats};
use pathryoshka::Error;
use proptest::prelude::*;

#[test]
fn nesting_levels_halve() {
    assert_eq!(nesting_levels(768, 5).unwrap().levels(), &[768, 384, 192, 96, 48]);
    assert_eq!(nesting_levels(384, 5).unwrap().levels(), &[384, 192, 96, 48, 24]);
    assert_eq!(nesting_levels(96, 1).unwrap().levels(), &[96]);
    assert_eq!(nesting_levels(5, 2).unwrap().levels(), &[5, 2]);
    assert!(matches!(nesting_levels(8, 0), Err(Error::Config(_))));
    assert!(matches!(nesting_levels(8, 5), Err(Error::Config(_))));
}

#[test]
fn custom_levels_must_decrease_from_width() {
    assert!(NestingLevels::new(vec![64, 32, 8], 64).is_ok());
    assert!(NestingLevels::new(vec![32, 16], 64).is_err());
    assert!(NestingLevels::new(vec![64, 64], 64).is_err());
    assert!(NestingLevels::new(vec![64, 0], 64).is_err());
}

#[test]
fn bank_has_one_head_per_teacher_kind_level() {
    let b = bank(32, 3, &[8, 12], 0);
    assert_eq!(b.num_heads(), 2 * 2 * 3);
    for t in ["t0", "t1"] {
        for kind in HeadKind::ALL {
            for &m in b.levels.levels() {
                let h = b.head(t, kind, m).unwrap();
                assert_eq!(h.input_dim(), m);
                assert_eq!(h.output_dim(), if t == "t0" { 8 } else { 12 });
            }
        }
    }
    assert!(matches!(b.head("t2", HeadKind::Cls, 32), Err(Error::Key(_))));
    assert!(matches!(b.head("t0", HeadKind::Cls, 10), Err(Error::Key(_))));
    let names: Vec<String> = b.params().into_iter().map(|(n, _)| n).collect();
    assert!(names.contains(&"head/t1/patch/8/fc3.bias".to_string()));
}

#[test]
fn select_keeps_heads_of_named_teachers() {
    let b = bank(16, 2, &[8, 10, 12], 3);
    let s = b.select(&["t2", "t0"]).unwrap();
    assert_eq!(s.teachers.iter().map(|t| t.dim).collect::<Vec<_>>(), vec![12, 8]);
    assert_eq!(s.head("t2", HeadKind::Patch, 8).unwrap(), b.head("t2", HeadKind::Patch, 8).unwrap());
}

#[test]
fn heads_read_only_their_prefix() {
    let b = bank(48, 4, &[8, 16, 24], 11);
    assert_eq!(prefix_violations(&b, 3, 10, 5), 0);
}

#[test]
fn heads_see_components_inside_their_prefix() {
    let b = bank(16, 3, &[8], 2);
    let x = gaussian(16, 1);
    for &m in b.levels.levels() {
        let mut y = x.clone();
        y[m - 1] += 1.0;
        assert_ne!(project_cls(&b, &x, "t0", m).unwrap(), project_cls(&b, &y, "t0", m).unwrap());
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut fx = LossFixture::new(16, 3, &[8, 12], 3, 4, 7);
    let worst = loss_grad_check(&mut fx, 40, 1);
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn cosine_loss_examples() {
    assert_eq!(cosine_loss(&[1.0f64, 0.0], &[0.0, 3.0]), 1.0);
    assert!(cosine_loss(&[1.0f64, 2.0], &[2.0, 4.0]).abs() < 1e-15);
    assert!((cosine_loss(&[1.0f64, 2.0], &[-1.0, -2.0]) - 2.0).abs() < 1e-15);
    assert_eq!(cosine_loss(&[0.0f64, 0.0], &[1.0, 1.0]), 1.0);
}

proptest! {
    #[test]
    fn cosine_loss_bounded_and_scale_invariant(
        a in prop::collection::vec(-10.0f64..10.0, 6),
        b in prop::collection::vec(-10.0f64..10.0, 6),
        s in 0.01f64..100.0,
    ) {
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(na > 1e-3 && nb > 1e-3);
        let l = cosine_loss(&a, &b);
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&l));
        let scaled: Vec<f64> = a.iter().map(|v| v * s).collect();
        prop_assert!((cosine_loss(&scaled, &b) - l).abs() < 1e-12);
        let oracle = 1.0 - a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
        prop_assert!((l - oracle).abs() < 1e-12);
    }
}

/// Bank whose heads emit the constant `value` for every input.
fn constant_bank(width: usize, depth: usize, dims: &[usize], value: impl Fn(usize) -> f64) -> pathryoshka::heads::HeadBank<f64> {
    let mut b = bank(width, depth, dims, 0);
    for (name, p) in b.params_mut() {
        if name.ends_with("fc3.weight") {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        } else if name.ends_with("fc3.bias") {
            p.value.iter_mut().enumerate().for_each(|(i, v)| *v = value(i));
        }
    }
    b
}

#[test]
fn orthogonal_targets_cost_one_per_teacher_and_level() {
    let b = constant_bank(32, 5, &[4, 4], |i| if i == 0 { 1.0 } else { 0.0 });
    let batch = 3;
    let cls = gaussian(batch * 32, 1);
    let target: Vec<f64> = (0..batch).flat_map(|_| [0.0, 2.5, -1.0, 0.0]).collect();
    let s = StudentTokens { batch, cls: &cls, patches: None };
    let t = [
        TeacherTokens { name: "t0", cls: &target, patches: None },
        TeacherTokens { name: "t1", cls: &target, patches: None },
    ];
    let (v, parts) = cls_loss(&b, &s, &t).unwrap();
    assert_eq!(v, 10.0);
    assert_eq!(parts.len(), 10);
    assert!(parts.values().all(|&p| p == 1.0));
}

#[test]
fn cls_loss_ignores_target_scale() {
    let fx = LossFixture::new(16, 2, &[8], 4, 1, 3);
    let s = StudentTokens { batch: 4, cls: &fx.cls_a, patches: None };
    let scaled: Vec<f64> = fx.t_cls_a[0].iter().map(|v| v * 7.5).collect();
    let a = cls_loss(&fx.bank, &s, &[TeacherTokens { name: "t0", cls: &fx.t_cls_a[0], patches: None }]).unwrap().0;
    let b = cls_loss(&fx.bank, &s, &[TeacherTokens { name: "t0", cls: &scaled, patches: None }]).unwrap().0;
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn standardized_tokens_have_unit_moments() {
    let dim = 12;
    let raw: Vec<f64> = gaussian(200 * dim, 4).iter().enumerate().map(|(k, v)| v * (0.5 + (k % dim) as f64) + 10.0 * (k % dim) as f64 - 30.0).collect();
    let z = standardize_batch(&raw, dim);
    let (mean, std) = column_moments(&z, dim);
    for j in 0..dim {
        assert!(mean[j].abs() < 1e-5, "channel {j} mean {}", mean[j]);
        assert!((std[j] - 1.0).abs() < 1e-4, "channel {j} std {}", std[j]);
    }
    let stats = StandardizationStats::from_tokens(&raw, dim);
    let (m2, s2) = column_moments(&raw, dim);
    for j in 0..dim {
        assert!((stats.mean[j] - m2[j]).abs() < 1e-10);
        assert!((stats.std[j] - s2[j]).abs() < 1e-10);
    }
}

#[test]
fn constant_channel_standardizes_to_zero() {
    let raw: Vec<f64> = (0..20).flat_map(|i| [4.0, i as f64]).collect();
    let z = standardize_patch_tokens(&raw, &StandardizationStats::from_tokens(&raw, 2));
    assert!(z.iter().step_by(2).all(|&v| v == 0.0));
}

fn patch_value(fx: &LossFixture, teacher_patches: &[f64]) -> f64 {
    let s = StudentTokens { batch: fx.batch, cls: &fx.cls_a, patches: Some(&fx.patches) };
    patch_loss(&fx.bank, &s, &[TeacherTokens { name: "t0", cls: &fx.t_cls_a[0], patches: Some(teacher_patches) }])
        .unwrap()
        .0
}

#[test]
fn patch_loss_is_affine_invariant_per_channel() {
    let fx = LossFixture::new(16, 3, &[8], 4, 9, 5);
    let base = patch_value(&fx, &fx.t_patches[0]);
    let scale = [0.3, 1.0, 2.0, 5.0, 0.7, 1.5, 3.0, 0.9];
    let shift = [-4.0, 0.0, 10.0, 1.0, -0.5, 3.0, 7.0, -9.0];
    let moved: Vec<f64> = fx.t_patches[0].iter().enumerate().map(|(k, v)| v * scale[k % 8] + shift[k % 8]).collect();
    let rel = (patch_value(&fx, &moved) - base).abs() / base;
    assert!(rel < 1e-5, "relative change {rel}");
}

#[test]
fn zero_projection_costs_unit_variance() {
    let b = constant_bank(16, 3, &[6, 10], |_| 0.0);
    let fx = LossFixture::new(16, 3, &[6, 10], 4, 25, 8);
    let s = StudentTokens { batch: 4, cls: &fx.cls_a, patches: Some(&fx.patches) };
    let t = [
        TeacherTokens { name: "t0", cls: &fx.t_cls_a[0], patches: Some(&fx.t_patches[0]) },
        TeacherTokens { name: "t1", cls: &fx.t_cls_a[1], patches: Some(&fx.t_patches[1]) },
    ];
    let (v, parts) = patch_loss(&b, &s, &t).unwrap();
    assert_eq!(parts.len(), 6);
    for p in parts.values() {
        assert!((p - 1.0).abs() < 1e-5, "{p}");
    }
    assert!((v - 6.0).abs() < 1e-4);
}

#[test]
fn disabled_nonaligned_crop_contributes_exact_zero() {
    let fx = LossFixture::new(16, 2, &[8], 2, 4, 1);
    let s = StudentTokens { batch: 2, cls: &fx.cls_a, patches: Some(&fx.patches) };
    let t = [TeacherTokens { name: "t0", cls: &fx.t_cls_a[0], patches: Some(&fx.t_patches[0]) }];
    let r = total_loss(&fx.bank, (&s, &t), None, LossWeights::default()).unwrap();
    assert_eq!(r.cls_nonaligned, 0.0);
    assert_eq!(r.total, r.cls_aligned + r.patch_aligned);
    assert!(r.breakdown.keys().all(|k| !k.starts_with("cls_nonaligned")));
}

#[test]
fn weights_scale_components() {
    let fx = LossFixture::new(16, 2, &[8], 2, 4, 1);
    let s = StudentTokens { batch: 2, cls: &fx.cls_a, patches: Some(&fx.patches) };
    let t = [TeacherTokens { name: "t0", cls: &fx.t_cls_a[0], patches: Some(&fx.t_patches[0]) }];
    let r = total_loss(&fx.bank, (&s, &t), None, LossWeights { cls: 2.0, patch: 0.5 }).unwrap();
    assert!((r.total - (2.0 * r.cls_aligned + 0.5 * r.patch_aligned)).abs() < 1e-12);
}

#[test]
fn missing_teacher_outputs_are_key_errors() {
    let fx = LossFixture::new(16, 2, &[8, 8], 2, 4, 1);
    let s = StudentTokens { batch: 2, cls: &fx.cls_a, patches: Some(&fx.patches) };
    let only_one = [TeacherTokens { name: "t0", cls: &fx.t_cls_a[0], patches: Some(&fx.t_patches[0]) }];
    assert!(matches!(total_loss(&fx.bank, (&s, &only_one), None, LossWeights::default()), Err(Error::Key(_))));
    let no_patches = [
        TeacherTokens { name: "t0", cls: &fx.t_cls_a[0], patches: None },
        TeacherTokens { name: "t1", cls: &fx.t_cls_a[1], patches: None },
    ];
    assert!(matches!(total_loss(&fx.bank, (&s, &no_patches), None, LossWeights::default()), Err(Error::Key(_))));
}
