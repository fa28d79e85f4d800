use proptest::prelude::*;

use fgs::analytic::{AnalyticDenoiser, MixtureModel};
use fgs::denoiser::Condition;
use fgs::diffusion::{make_schedule, ScheduleKind};
use fgs::eval::benchmark::train_classifier;
use fgs::eval::checkpoint::{Checkpoint, NamedTensor};
use fgs::eval::config::ExperimentConfig;
use fgs::eval::export::pgm_bytes;
use fgs::eval::metrics::{editability_score, faithfulness_distance, structure_selfsim_distance};
use fgs::eval::scene::Mask;
use fgs::eval::sweep::format_sig6;
use fgs::guidance::GuidanceConfig;
use fgs::pipeline::{run_baseline, run_fgs, EditRequest, ReconMode};
use fgs::tensor::Grid;
use fgs::transfer::{InjectionPolicy, PerturbKind};

fn grid(h: usize, w: usize, lo: f64, hi: f64) -> impl Strategy<Value = Grid> {
    prop::collection::vec(lo..hi, h * w).prop_map(move |d| Grid::new(h, w, d).unwrap())
}

fn mask16() -> impl Strategy<Value = Mask> {
    prop::collection::vec(any::<bool>(), 256).prop_map(|c| Mask::new(16, 16, c).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn faithfulness_of_identical_images_is_zero(x in grid(16, 16, 0.0, 1.0), m in mask16()) {
        let f = faithfulness_distance(&x, &x, &m).unwrap();
        prop_assert_eq!((f.whole, f.unedited), (0.0, 0.0));
    }

    #[test]
    fn faithfulness_is_non_negative_and_symmetric(a in grid(16, 16, 0.0, 1.0), b in grid(16, 16, 0.0, 1.0), m in mask16()) {
        let ab = faithfulness_distance(&a, &b, &m).unwrap();
        let ba = faithfulness_distance(&b, &a, &m).unwrap();
        prop_assert!(ab.whole >= 0.0 && ab.unedited >= 0.0);
        prop_assert_eq!(ab, ba);
    }

    #[test]
    fn selfsim_is_invariant_to_positive_affine_maps(x in grid(16, 16, 0.0, 1.0), a in 0.1f64..3.0, b in -1.0f64..1.0) {
        let y = x.map(|v| a * v + b);
        prop_assert!(structure_selfsim_distance(&x, &y).unwrap() < 1e-9);
    }

    #[test]
    fn selfsim_is_a_bounded_symmetric_distance(x in grid(16, 16, 0.0, 1.0), y in grid(16, 16, 0.0, 1.0)) {
        let d = structure_selfsim_distance(&x, &y).unwrap();
        prop_assert!((0.0..=2.0).contains(&d));
        prop_assert_eq!(d, structure_selfsim_distance(&y, &x).unwrap());
    }

    #[test]
    fn sig6_keeps_six_significant_digits(mantissa in -1.0f64..1.0, exp in -12i32..12) {
        let v = mantissa * 10f64.powi(exp);
        let back: f64 = format_sig6(v).parse().unwrap();
        prop_assert!((back - v).abs() <= 5.000001e-6 * v.abs(), "{} -> {}", v, format_sig6(v));
    }

    #[test]
    fn pgm_bytes_track_intensity(x in grid(5, 7, 0.0, 1.0)) {
        let bytes = pgm_bytes(&x).unwrap();
        let header = b"P5\n7 5\n255\n".len();
        prop_assert_eq!(bytes.len(), header + 35);
        for (&b, &v) in bytes[header..].iter().zip(x.data()) {
            prop_assert!((b as f64 - 255.0 * v).abs() <= 0.5);
        }
        prop_assert_eq!(bytes, pgm_bytes(&x).unwrap());
    }

    #[test]
    fn checkpoints_round_trip(
        shapes in prop::collection::vec((1usize..5, 1usize..5), 1..5),
        seed in any::<u64>(),
        note in "[a-z]{0,12}",
    ) {
        let mut bits = seed;
        let tensors: Vec<NamedTensor> = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| NamedTensor {
                name: format!("t{i}"),
                rows: r,
                cols: c,
                data: (0..r * c)
                    .map(|_| {
                        bits = bits.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                        let v = f32::from_bits((bits >> 32) as u32);
                        if v.is_nan() { 0.0 } else { v }
                    })
                    .collect(),
            })
            .collect();
        let mut c = Checkpoint { tensors, ..Checkpoint::default() };
        c.metadata.insert("note".into(), note);
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn guidance_config_text_round_trips(
        w_cfg in 0.0f64..20.0,
        w_fg in 0.0f64..60.0,
        k in 0.5f64..2000.0,
        tau in 0.0f64..=1.0,
        sigma in 0.1f64..50.0,
        schedule in any::<bool>(),
    ) {
        let text = format!(
            "guidance.w_cfg = {w_cfg}\nguidance.w_fg = {w_fg}\nguidance.k = {k}\nguidance.tau = {tau}\nguidance.schedule = {schedule}\nperturb.sigma = {sigma}\n"
        );
        let cfg = ExperimentConfig::parse(&text).unwrap();
        let expected = GuidanceConfig {
            w_cfg,
            w_fg,
            k,
            schedule,
            perturb: PerturbKind::Blur { sigma },
            injection: InjectionPolicy::new(tau).unwrap(),
            ..GuidanceConfig::default()
        };
        prop_assert_eq!(cfg.guidance, expected);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zero_fg_weight_never_changes_an_edit(
        input in prop::collection::vec(-3.0f64..3.0, 2),
        tau in 0.0f64..=1.0,
        k in 1.0f64..1000.0,
        schedule in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mixture = MixtureModel::uniform(vec![
            (vec![-2.0, -1.0], 0.1),
            (vec![-2.0, 1.0], 0.1),
            (vec![2.0, -1.0], 0.1),
            (vec![2.0, 1.0], 0.1),
        ])
        .unwrap();
        let den = AnalyticDenoiser::new(mixture, vec![vec![0, 1], vec![2, 3]], (1, 2)).unwrap();
        let sched = make_schedule(ScheduleKind::Cosine, 25).unwrap();
        let input = Grid::vector(input).unwrap();
        let g = GuidanceConfig { w_fg: 0.0, k, schedule, injection: InjectionPolicy::new(tau).unwrap(), ..GuidanceConfig::default() };
        let req = EditRequest {
            input: &input,
            source: Condition::Class(0),
            target: Condition::Class(1),
            guidance: &g,
            recon_mode: ReconMode::Replay,
            denoiser: &den,
            sched: &sched,
            seed,
        };
        let (a, b) = (run_fgs(&req).unwrap(), run_baseline(&req).unwrap());
        prop_assert_eq!(a.edited, b.edited);
        prop_assert_eq!(a.edit_path, b.edit_path);
    }
}

#[test]
fn editability_probabilities_normalize() {
    let classifier = train_classifier(5, 60).unwrap();
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig::with_cases(32));
    runner
        .run(
            &(grid(16, 16, 0.0, 1.0), mask16(), 0usize..6),
            |(x, m, target)| {
                let p: f64 = classifier
                    .log_probabilities(&x)
                    .unwrap()
                    .iter()
                    .map(|l| l.exp())
                    .sum();
                prop_assert!((p - 1.0).abs() < 1e-12);
                let e = editability_score(&x, target, &classifier, &m).unwrap();
                prop_assert!(
                    e.whole <= 0.0
                        && e.edited_region <= 0.0
                        && e.whole.is_finite()
                        && e.edited_region.is_finite()
                );
                Ok(())
            },
        )
        .unwrap();
}
