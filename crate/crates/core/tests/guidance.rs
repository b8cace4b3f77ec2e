use injectdiff::features::InjectionConfig;
use injectdiff::guidance::{alpha_at, cfg, negative_mix, NegPromptSchedule, NegScheduleKind};
use injectdiff::pipeline::{step_fraction, GuidanceSource, Preset, PresetName, TranslationRequest};
use injectdiff::Tensor;
use proptest::prelude::*;

fn vec_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..64).prop_flat_map(|n| (prop::collection::vec(-10.0f64..10.0, n), prop::collection::vec(-10.0f64..10.0, n)))
}

fn t(v: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![v.len()], v.to_vec()).unwrap()
}

proptest! {
    #[test]
    fn cfg_matches_scalar_recomposition((c, r) in vec_strategy(), w in 1.0f64..30.0) {
        let out = cfg(&t(&c), &t(&r), w).unwrap();
        for i in 0..c.len() {
            // eps_ref + w (eps_cond - eps_ref)
            prop_assert!((out.data()[i] - (r[i] + w * (c[i] - r[i]))).abs() < 1e-6);
        }
    }

    #[test]
    fn negative_mix_matches_scalar_recomposition((e, n) in vec_strategy(), a in 0.0f64..=1.0) {
        let out = negative_mix(&t(&e), &t(&n), a).unwrap();
        for i in 0..e.len() {
            prop_assert!((out.data()[i] - (n[i] + a * (e[i] - n[i]))).abs() < 1e-6);
        }
    }

    #[test]
    fn alpha_stays_in_unit_interval(a0 in -1.0f64..2.0, f in 0.0f64..=1.0) {
        for s in [NegPromptSchedule::linear(a0), NegPromptSchedule::constant(a0), NegPromptSchedule::exponential()] {
            let a = alpha_at(&s, f);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn linear_and_exponential_never_increase(a0 in 0.0f64..=1.0, f in 0.0f64..1.0, d in 0.0f64..1.0) {
        let g = (f + d).min(1.0);
        for s in [NegPromptSchedule::linear(a0), NegPromptSchedule::exponential()] {
            prop_assert!(alpha_at(&s, g) <= alpha_at(&s, f));
        }
    }

    #[test]
    fn thresholds_inject_the_earliest_steps(n in 1usize..200, tf in 0usize..200, ta in 0usize..200) {
        let inj = InjectionConfig { n_steps: n, tau_f: tf.min(n), tau_a: ta.min(n), ..InjectionConfig::default() };
        let f: Vec<usize> = (0..n).filter(|&i| inj.injects_features(i)).collect();
        let a: Vec<usize> = (0..n).filter(|&i| inj.injects_attention(i)).collect();
        prop_assert_eq!(f, (0..n - tf.min(n)).collect::<Vec<_>>());
        prop_assert_eq!(a, (0..n - ta.min(n)).collect::<Vec<_>>());
    }
}

#[test]
fn unit_scale_is_bit_exact() {
    let c = t(&[0.1, f64::MIN_POSITIVE, -3.0e300]);
    let r = t(&[7.0, 1.0, 2.0]);
    assert_eq!(cfg(&c, &r, 1.0).unwrap(), c);
}

#[test]
fn linear_schedule_from_alpha0() {
    let s = NegPromptSchedule::linear(0.75);
    assert_eq!(alpha_at(&s, 0.0), 0.75);
    assert!((alpha_at(&s, 0.5) - 0.25).abs() < 1e-15);
    assert_eq!(alpha_at(&s, 1.0), 0.0);
    let e = NegPromptSchedule::exponential();
    assert!((alpha_at(&e, 0.5) - (-3.0f64).exp()).abs() < 1e-15);
}

#[test]
fn step_fraction_spans_the_run() {
    assert_eq!(step_fraction(0, 50), 0.0);
    assert_eq!(step_fraction(49, 50), 1.0);
    assert_eq!(step_fraction(0, 1), 0.0);
}

#[test]
fn presets_carry_the_published_constants() {
    let blank = || TranslationRequest::new(GuidanceSource::Generated { prompt: "a red circle".into(), seed: 0 }, "x");
    let mut r = blank();
    Preset::get(PresetName::DefaultReal).apply(&mut r);
    assert_eq!(r.guidance_scale, 15.0);
    assert_eq!(r.neg_schedule, NegPromptSchedule::linear(1.0));
    assert_eq!((r.injection.tau_f, r.injection.tau_a, r.injection.n_steps), (40, 25, 50));
    assert_eq!(r.n_inv_steps, 1000);

    let mut r = blank();
    Preset::get(PresetName::DefaultGenerated).apply(&mut r);
    assert_eq!(r.guidance_scale, 7.5);
    assert_eq!(r.neg_schedule, NegPromptSchedule::linear(0.75));
    assert_eq!((r.injection.tau_f, r.injection.tau_a), (40, 25));

    let mut r = blank();
    Preset::get(PresetName::Primitive).apply(&mut r);
    assert_eq!(r.neg_schedule.kind, NegScheduleKind::Exponential);
    assert_eq!((r.injection.tau_f, r.injection.tau_a), (25, 25));

    let mut r = blank();
    Preset::get(PresetName::WoFeatures).apply(&mut r);
    assert_eq!(r.injection.tau_f, r.injection.n_steps);
    let mut r = blank();
    Preset::get(PresetName::WoSelfattn).apply(&mut r);
    assert_eq!(r.injection.tau_a, r.injection.n_steps);
    let mut r = blank();
    Preset::get(PresetName::WoNegprompt).apply(&mut r);
    assert_eq!(r.neg_schedule, NegPromptSchedule::NEUTRAL);
    let mut r = blank();
    Preset::get(PresetName::EncoderFeat7).apply(&mut r);
    assert!(r.injection.feature_layers.is_empty());
    assert_eq!(r.injection.encoder_feature_layers.iter().copied().collect::<Vec<_>>(), vec![7]);
}

#[test]
fn request_defaults_follow_the_guidance_kind() {
    let img = Tensor::<f64>::zeros(vec![3, 64, 64]);
    let real = TranslationRequest::new(GuidanceSource::Image(img), "a red circle");
    assert_eq!(real.guidance_scale, 15.0);
    let gen = TranslationRequest::new(GuidanceSource::Generated { prompt: "a blue ring".into(), seed: 3 }, "a red ring");
    assert_eq!(gen.guidance_scale, 7.5);
    assert_eq!(gen.negative(), "a blue ring");
}
