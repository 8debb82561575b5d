use aidkit::metrics::{
    consistency, evaluate, frechet_distance, frechet_fidelity, gini, smoothness, DownsampleFeatures,
    EncoderDistance, FeatureExtractor, FeatureMoments, PerceptualDistance, PixelL2,
};
use aidkit::model::{DenoiserWeights, ModelConfig};
use aidkit::numerics::randn;
use aidkit::{SeededRng, Tensor};
use proptest::prelude::*;

fn images(seed: u64, n: usize) -> Vec<Tensor> {
    let mut rng = SeededRng::new(seed);
    (0..n).map(|_| randn(&mut rng, &[16, 16])).collect()
}

#[test]
fn distances_are_metrics_on_samples() {
    let w = DenoiserWeights::init(ModelConfig::default(), &mut SeededRng::new(2)).unwrap();
    let enc = EncoderDistance::new(&w);
    let imgs = images(3, 4);
    for p in [&PixelL2 as &dyn PerceptualDistance, &enc] {
        for a in &imgs {
            assert_eq!(p.distance(a, a).unwrap(), 0.0);
            for b in &imgs {
                let d = p.distance(a, b).unwrap();
                assert!(d >= 0.0);
                assert_eq!(d, p.distance(b, a).unwrap());
            }
        }
    }
}

#[test]
fn identical_feature_sets_have_zero_distance() {
    let seqs = [images(5, 5), images(6, 5), images(7, 5)];
    let fx = DownsampleFeatures;
    let mut feats: Vec<Vec<f64>> = seqs.iter().flatten().map(|i| fx.features(i).unwrap()).collect();
    let a = FeatureMoments::from_features(&feats).unwrap();
    feats.reverse();
    let b = FeatureMoments::from_features(&feats).unwrap();
    assert!(frechet_distance(&a, &b).unwrap() < 1e-6);
}

#[test]
fn fidelity_needs_interior_images() {
    let fx = DownsampleFeatures;
    assert!(frechet_fidelity(&[images(1, 2)], &fx).is_err());
    assert!(frechet_fidelity(&[images(1, 3)], &fx).is_err());
    assert!(frechet_fidelity(&[images(1, 4)], &fx).unwrap() >= 0.0);
}

#[test]
fn evaluate_matches_single_sequence_values() {
    let seq = images(9, 6);
    let r = evaluate(std::slice::from_ref(&seq), &PixelL2, &DownsampleFeatures).unwrap();
    assert_eq!(r.consistency, consistency(&seq, &PixelL2).unwrap());
    assert_eq!(r.smoothness, smoothness(&seq, &PixelL2).unwrap());
    let twice = evaluate(&[seq.clone(), seq.clone()], &PixelL2, &DownsampleFeatures).unwrap();
    assert!((twice.consistency - r.consistency).abs() < 1e-15);
    assert!((twice.smoothness - r.smoothness).abs() < 1e-15);
    assert!(evaluate::<Vec<Tensor>>(&[], &PixelL2, &DownsampleFeatures).is_err());
}

proptest! {
    #[test]
    fn gini_is_scale_invariant_and_bounded(xs in prop::collection::vec(0.0f64..10.0, 1..20), c in 0.01f64..100.0) {
        let g = gini(&xs).unwrap();
        prop_assert!((0.0..1.0).contains(&g));
        let scaled: Vec<f64> = xs.iter().map(|x| x * c).collect();
        prop_assert!((gini(&scaled).unwrap() - g).abs() < 1e-12);
    }

    #[test]
    fn sequence_metrics_ignore_direction(seed in 0u64..1000, n in 2usize..8) {
        let seq = images(seed, n);
        let mut rev = seq.clone();
        rev.reverse();
        prop_assert!((consistency(&seq, &PixelL2).unwrap() - consistency(&rev, &PixelL2).unwrap()).abs() < 1e-12);
        let s = smoothness(&seq, &PixelL2).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((s - smoothness(&rev, &PixelL2).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative(seed in 0u64..1000, na in 2usize..12, nb in 2usize..12) {
        let mut rng = SeededRng::new(seed);
        let mut set = |n: usize, shift: f64| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..4).map(|_| rng.normal() + shift).collect()).collect()
        };
        let a = FeatureMoments::from_features(&set(na, 0.0)).unwrap();
        let b = FeatureMoments::from_features(&set(nb, 0.7)).unwrap();
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-8, "{} vs {}", ab, ba);
    }
}
