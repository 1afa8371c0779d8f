use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semadv::data::synthetic_digits;
use semadv::models::{ClassifierArch, ClassifierParams, Network, Norm, PgdConfig};
use semadv::pipeline::{
    kappa_keep, pgd_baseline_grid, refine, rejection_sample, run_attack, run_grid,
    sample_distribution, surrogate_success_rate, AttackConfig, GridSource, Models, PipelineError,
    RejectionOutcome, SampleRecord,
};
use semadv::samplers::{AdvEnergySpec, DistanceKind, Objective, SamplerConfig};
use semadv::tensor::Tensor;

/// A classifier whose logits are the same for every input, with `class` on top.
fn constant_classifier(class: usize) -> ClassifierParams<f32> {
    let mut net = ClassifierParams::<f32>::zeros(ClassifierArch::compact()).unwrap();
    let bias = net.params_mut().tensors_mut().last().unwrap();
    bias.data_mut()[class] = 5.0;
    net
}

/// Predicts `lit` for any image with a positive pixel and `dark` for a black one.
fn brightness_classifier(lit: usize, dark: usize) -> ClassifierParams<f32> {
    let mut net = ClassifierParams::<f32>::zeros(ClassifierArch::compact()).unwrap();
    {
        let mut t = net.params_mut().tensors_mut();
        let (conv1_w, _, conv2_w, _, fc1_w, _, fc2_w, fc2_b) = (
            t.next().unwrap(),
            t.next(),
            t.next().unwrap(),
            t.next(),
            t.next().unwrap(),
            t.next(),
            t.next().unwrap(),
            t.next().unwrap(),
        );
        // Filter 0 of each conv layer sums its window over every input channel.
        let per1 = conv1_w.len() / conv1_w.shape()[0];
        conv1_w.data_mut()[..per1].iter_mut().for_each(|v| *v = 1.0);
        let per2 = conv2_w.len() / conv2_w.shape()[0];
        conv2_w.data_mut()[..per2].iter_mut().for_each(|v| *v = 1.0);
        let flat = fc1_w.shape()[1];
        fc1_w.data_mut()[..flat].iter_mut().for_each(|v| *v = 1.0);
        let hidden = fc2_w.shape()[1];
        fc2_w.data_mut()[lit * hidden] = 1.0;
        fc2_b.data_mut()[dark] = 0.5;
    }
    net
}

fn random_classifier(seed: u64) -> ClassifierParams<f32> {
    ClassifierParams::init(
        ClassifierArch::compact(),
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap()
}

fn quick_config(m: usize) -> AttackConfig {
    AttackConfig {
        m,
        n: m.min(4),
        kappa: 0.5,
        energy: AdvEnergySpec {
            c1: 1.0,
            c2: 1.0,
            distance: DistanceKind::L2sq,
            objective: Objective::Cw,
        },
        sampler: SamplerConfig {
            steps: 20,
            seed: 5,
            ..SamplerConfig::default()
        },
        chunk: 4,
    }
}

fn digit(i: usize) -> (Tensor<f32>, usize) {
    let data = synthetic_digits(10, 2);
    (data.image(i), data.labels[i])
}

fn rec(chain: usize, aux: f64, energy: f64) -> SampleRecord {
    SampleRecord {
        chain,
        image: Tensor::zeros(&[1, 28, 28]),
        logits: vec![],
        deceives: true,
        energy,
        aux_score: aux,
    }
}

#[test]
fn victim_that_always_predicts_target_keeps_every_chain() {
    let (x, y) = digit(0);
    let y_tar = (y + 1) % 10;
    let victim = constant_classifier(y_tar);
    let aux = random_classifier(1);
    let cfg = quick_config(10);
    let out = rejection_sample(
        &cfg,
        &x,
        y,
        y_tar,
        Models {
            victim: &victim,
            aux: &aux,
            ebm: None,
        },
    )
    .unwrap();
    let RejectionOutcome::Accepted {
        records,
        diagnostics,
    } = out
    else {
        panic!("expected acceptances");
    };
    assert_eq!(records.len(), 10);
    assert_eq!(diagnostics.accepted, 10);
    assert_eq!(
        records.iter().map(|r| r.chain).collect::<Vec<_>>(),
        (0..10).collect::<Vec<_>>()
    );
    for r in &records {
        assert!(r.deceives && r.energy.is_finite());
        assert!(r.image.all_within(0.0, 1.0));
        let d: f64 = r
            .image
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        assert!((r.energy - d).abs() < 1e-3 * d.max(1.0));
        assert!((0.0..=1.0).contains(&r.aux_score));
    }
}

#[test]
fn victim_that_never_predicts_target_reports_no_acceptance() {
    let (x, y) = digit(1);
    let y_tar = (y + 1) % 10;
    let victim = constant_classifier(y);
    let aux = random_classifier(2);
    let cfg = quick_config(6);
    let models = Models {
        victim: &victim,
        aux: &aux,
        ebm: None,
    };
    let out = rejection_sample(&cfg, &x, y, y_tar, models).unwrap();
    let RejectionOutcome::NoAcceptance(d) = &out else {
        panic!("expected no acceptance");
    };
    assert_eq!(d.accepted, 0);
    assert!(out.records().is_empty());
    // CW margin is the constant logit gap: 5 − 0.
    assert!(
        (d.mean_objective - 5.0).abs() < 1e-5,
        "{}",
        d.mean_objective
    );
    let res = run_attack(&x, y, y_tar, &cfg, models).unwrap();
    assert!(res.report.no_acceptance && res.refined.is_empty());
    assert_eq!(res.report.acceptance_rate, 0.0);
    assert_eq!(res.report.refined_mean_energy, None);
}

#[test]
fn same_class_and_bad_config_are_rejected() {
    let (x, y) = digit(2);
    let victim = random_classifier(3);
    let models = Models {
        victim: &victim,
        aux: &victim,
        ebm: None,
    };
    assert!(matches!(
        run_attack(&x, y, y, &quick_config(4), models),
        Err(PipelineError::SameClass(_))
    ));
    let bad = [
        AttackConfig {
            m: 0,
            ..quick_config(4)
        },
        AttackConfig {
            n: 5,
            ..quick_config(4)
        },
        AttackConfig {
            kappa: 0.0,
            ..quick_config(4)
        },
        AttackConfig {
            kappa: 1.5,
            ..quick_config(4)
        },
        AttackConfig {
            chunk: 0,
            ..quick_config(4)
        },
    ];
    for cfg in &bad {
        assert!(matches!(
            rejection_sample(cfg, &x, y, (y + 1) % 10, models),
            Err(PipelineError::Config(_))
        ));
    }
    let semantic = AttackConfig {
        energy: AdvEnergySpec {
            distance: DistanceKind::Semantic,
            ..quick_config(4).energy
        },
        ..quick_config(4)
    };
    assert!(rejection_sample(&semantic, &x, y, (y + 1) % 10, models).is_err());
}

#[test]
fn results_do_not_depend_on_chunking() {
    let (x, y) = digit(3);
    let victim = random_classifier(4);
    let aux = random_classifier(5);
    let models = Models {
        victim: &victim,
        aux: &aux,
        ebm: None,
    };
    let y_tar = (y + 3) % 10;
    let run = |chunk| {
        let cfg = AttackConfig {
            chunk,
            ..quick_config(9)
        };
        rejection_sample(&cfg, &x, y, y_tar, models).unwrap()
    };
    let base = run(1);
    assert_eq!(run(4), base);
    assert_eq!(run(50), base);
    let a = run_attack(&x, y, y_tar, &quick_config(9), models).unwrap();
    let b = run_attack(&x, y, y_tar, &quick_config(9), models).unwrap();
    assert_eq!(a, b);
}

#[test]
fn refine_hand_trace() {
    let r = vec![
        rec(0, 0.9, 5.0),
        rec(1, 0.8, 1.0),
        rec(2, 0.2, 0.0),
        rec(3, 0.1, 0.0),
    ];
    let out = refine(&r, 0.5, 4);
    assert_eq!(
        out.iter().map(|r| r.energy).collect::<Vec<_>>(),
        vec![1.0, 5.0]
    );
    assert_eq!(out.iter().map(|r| r.chain).collect::<Vec<_>>(), vec![1, 0]);
}

#[test]
fn refine_degenerate_settings() {
    let r = vec![
        rec(0, 0.3, 2.0),
        rec(1, 0.7, -1.0),
        rec(2, 0.5, 4.0),
        rec(3, 0.1, 0.5),
    ];
    let all = refine(&r, 1.0, r.len());
    assert_eq!(
        all.iter().map(|r| r.chain).collect::<Vec<_>>(),
        vec![1, 3, 0, 2]
    );
    let one = refine(&r, 0.75, 1);
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].chain, 1);
    assert_eq!(refine(&r, 0.01, 10).len(), 1);
    assert!(refine(&[], 0.5, 3).is_empty());
}

#[test]
fn surrogate_rate_counts_matches() {
    let records: Vec<SampleRecord> = (0..10).map(|i| rec(i, 0.5, 0.0)).collect();
    assert_eq!(
        surrogate_success_rate(&records, 4, &constant_classifier(4)).unwrap(),
        1.0
    );
    assert_eq!(
        surrogate_success_rate(&records, 4, &constant_classifier(7)).unwrap(),
        0.0
    );
    assert!(matches!(
        surrogate_success_rate(&[], 4, &constant_classifier(4)),
        Err(PipelineError::Empty)
    ));

    let (y, z) = (3, 8);
    let surrogate = brightness_classifier(y, z);
    let (bright, _) = digit(0);
    let black = Tensor::<f32>::zeros(&[1, 28, 28]);
    assert_eq!(
        surrogate
            .predict(&Tensor::stack(&[bright.clone(), black.clone()]).unwrap())
            .unwrap(),
        vec![y, z]
    );
    let half: Vec<SampleRecord> = (0..10)
        .map(|i| SampleRecord {
            image: if i % 2 == 0 {
                bright.clone()
            } else {
                black.clone()
            },
            ..rec(i, 0.5, 0.0)
        })
        .collect();
    assert_eq!(surrogate_success_rate(&half, y, &surrogate).unwrap(), 0.5);
}

#[test]
fn grid_emits_matrix_and_reports() {
    let victim = random_classifier(7);
    let aux = random_classifier(8);
    let surrogate = random_classifier(9);
    let never = constant_classifier(0);
    let sources: Vec<GridSource> = [0usize, 1]
        .iter()
        .map(|&i| {
            let (x, y) = digit(i);
            GridSource {
                x_ori: x,
                y_ori: y,
                targets: (0..10).filter(|&t| t != y).take(2).collect(),
                ebm: None,
            }
        })
        .collect();
    let cfg = quick_config(6);
    let grid = run_grid(&sources, &cfg, &victim, &aux, &surrogate).unwrap();
    let matrix = grid.success_matrix();
    assert_eq!(matrix.len(), 2);
    assert!(matrix
        .iter()
        .all(|r| r.len() == 2 && r.iter().all(|v| (0.0..=1.0).contains(v))));
    for row in &grid.rows {
        for cell in &row.cells {
            assert!(cell.refined.iter().all(|r| r.deceives));
            if let Some(rate) = cell
                .report
                .success_rate
                .filter(|_| !cell.refined.is_empty())
            {
                let direct = surrogate_success_rate(&cell.refined, row.y_ori, &surrogate).unwrap();
                assert_eq!(rate, direct);
            }
        }
    }
    let mut csv = Vec::new();
    grid.write_matrix_csv(&mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(csv.lines().next(), Some("source,r1,r2"));
    let mut jsonl = Vec::new();
    grid.write_reports_jsonl(&mut jsonl).unwrap();
    let lines: Vec<serde_json::Value> = String::from_utf8(jsonl)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    assert!(lines
        .iter()
        .all(|v| v["acceptance_rate"].is_number() && v["mean_target_softmax"].is_number()));

    // A victim that never moves off class 0 yields zero cells.
    let stuck = run_grid(&sources[1..], &cfg, &never, &aux, &surrogate).unwrap();
    let y1 = sources[1].y_ori;
    for (cell, &t) in stuck.rows[0].cells.iter().zip(&sources[1].targets) {
        if t != 0 && y1 != 0 {
            assert!(cell.report.no_acceptance);
            assert_eq!(cell.report.success_rate, Some(0.0));
        }
    }
}

#[test]
fn distribution_samples_stay_in_box() {
    let (x, _) = digit(4);
    let victim = random_classifier(10);
    let spec = AdvEnergySpec {
        c1: 0.0,
        ..quick_config(1).energy
    };
    let s = sample_distribution(&victim, None, &x, 3, &spec, &quick_config(1).sampler, 7).unwrap();
    assert_eq!(s.shape(), &[7, 1, 28, 28]);
    assert!(s.all_within(0.0, 1.0));
}

fn norm_distance(a: &Tensor<f32>, b: &Tensor<f32>, norm: Norm) -> f64 {
    let d = a.data().iter().zip(b.data()).map(|(u, v)| (u - v) as f64);
    match norm {
        Norm::Linf => d.fold(0.0, |m, v| m.max(v.abs())),
        Norm::L2 => d.map(|v| v * v).sum::<f64>().sqrt(),
    }
}

#[test]
fn pgd_grid_respects_budget_and_diagonal() {
    let victim = random_classifier(11);
    let data = synthetic_digits(10, 4);
    let sources: Vec<(Tensor<f32>, usize)> =
        (0..3).map(|i| (data.image(i), data.labels[i])).collect();
    let targets: Vec<usize> = (0..10).collect();
    for settings in [
        PgdConfig {
            norm: Norm::Linf,
            eps: 0.3,
            alpha: 0.04,
            steps: 20,
        },
        PgdConfig {
            norm: Norm::L2,
            eps: 3.0,
            alpha: 0.2,
            steps: 20,
        },
    ] {
        let grid = pgd_baseline_grid(&victim, &sources, &targets, &settings).unwrap();
        assert_eq!((grid.rows, grid.cols), (3, 10));
        assert_eq!(grid.images.len(), 30);
        for (i, (x, y)) in sources.iter().enumerate() {
            for &t in &targets {
                let k = i * 10 + t;
                let img = &grid.images[k];
                assert!(img.all_within(0.0, 1.0));
                assert!(norm_distance(img, x, settings.norm) <= settings.eps + 1e-4);
                if t == *y {
                    assert_eq!(img, x);
                    assert!(!grid.deceives[k]);
                }
            }
        }
    }
}

#[test]
fn pgd_grid_zero_budget_and_monotone_budget() {
    let victim = random_classifier(12);
    let data = synthetic_digits(10, 5);
    let sources: Vec<(Tensor<f32>, usize)> =
        (0..4).map(|i| (data.image(i), data.labels[i])).collect();
    let targets: Vec<usize> = (0..10).collect();
    let clean = victim.predict(&data.batch::<f32>(&[0, 1, 2, 3]).0).unwrap();
    let zero = pgd_baseline_grid(
        &victim,
        &sources,
        &targets,
        &PgdConfig {
            eps: 0.0,
            ..PgdConfig::default()
        },
    )
    .unwrap();
    for (i, (x, y)) in sources.iter().enumerate() {
        for &t in &targets {
            let k = i * 10 + t;
            assert_eq!(&zero.images[k], x);
            assert_eq!(zero.deceives[k], t != *y && clean[i] == t);
        }
    }
    let l2 = |eps| PgdConfig {
        norm: Norm::L2,
        eps,
        alpha: 0.2,
        steps: 100,
    };
    let small = pgd_baseline_grid(&victim, &sources, &targets, &l2(3.0)).unwrap();
    let large = pgd_baseline_grid(&victim, &sources, &targets, &l2(5.0)).unwrap();
    assert!(
        large.deceive_count() >= small.deceive_count(),
        "{} < {}",
        large.deceive_count(),
        small.deceive_count()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn refine_is_an_energy_sorted_top_kappa_subset(
        scores in proptest::collection::vec((0.0f64..1.0, -10.0f64..10.0), 0..40),
        kappa in 0.01f64..=1.0,
        n in 1usize..50,
    ) {
        let records: Vec<SampleRecord> = scores.iter().enumerate().map(|(i, &(a, e))| rec(i, a, e)).collect();
        let out = refine(&records, kappa, n);
        let keep = kappa_keep(records.len(), kappa);
        prop_assert_eq!(out.len(), n.min(keep));
        if !records.is_empty() {
            prop_assert!(keep >= 1 && keep <= records.len());
            prop_assert_eq!(keep, ((kappa * records.len() as f64 + 1e-9).floor() as usize).max(1));
        }
        prop_assert!(out.windows(2).all(|w| w[0].energy <= w[1].energy));
        let mut chains: Vec<usize> = out.iter().map(|r| r.chain).collect();
        chains.sort_unstable();
        chains.dedup();
        prop_assert_eq!(chains.len(), out.len());
        // Every output outranks, by auxiliary score, every record outside the top κ.
        let mut aux: Vec<f64> = records.iter().map(|r| r.aux_score).collect();
        aux.sort_by(|a, b| b.total_cmp(a));
        if let Some(&cut) = aux.get(keep.saturating_sub(1)) {
            prop_assert!(out.iter().all(|r| r.aux_score >= cut));
        }
        for r in &out {
            prop_assert_eq!(r, &records[r.chain]);
        }
        // The kept records are the lowest-energy members of the κ-filtered set.
        if let Some(last) = out.last() {
            let filtered = refine(&records, kappa, usize::MAX);
            let excluded = filtered.iter().filter(|r| !out.iter().any(|o| o.chain == r.chain));
            for r in excluded {
                prop_assert!(r.energy >= last.energy);
            }
        }
    }
}
