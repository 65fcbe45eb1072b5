use proptest::prelude::*;

use tsmnet::adversary::{
    feature_matching, hinge_d_grad, hinge_d_loss, DiscriminatorConfig, MultiScaleDiscriminator,
};
use tsmnet::tensor::Tensor;

fn maps(v: &[f64], split: usize) -> Vec<Tensor<f64>> {
    let split = split.clamp(1, v.len() - 1);
    vec![
        Tensor::from_vec(&[1, 1, split], v[..split].to_vec()).unwrap(),
        Tensor::from_vec(&[1, 1, v.len() - split], v[split..].to_vec()).unwrap(),
    ]
}

#[test]
fn pooled_scales_have_halving_lengths() {
    let cfg = DiscriminatorConfig::default().with_channels(vec![4, 8, 8, 16, 16]);
    let d = MultiScaleDiscriminator::<f64>::new(cfg, 1).unwrap();
    let x = Tensor::from_vec(&[1, 1, 3000], (0..3000).map(|i| (i as f64 * 0.01).sin()).collect()).unwrap();
    let outs = d.discriminate_all(&x).unwrap();
    assert_eq!(outs.len(), 3);
    for (k, o) in outs.iter().enumerate() {
        let len = 3000usize.div_ceil(1 << k);
        assert_eq!(o.feature_maps.len(), 7);
        assert_eq!(o.logits().shape(), &[1, 1, len.div_ceil(256)]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn feature_matching_is_a_symmetric_distance(
        a in prop::collection::vec(-3.0f64..3.0, 2..40),
        b in prop::collection::vec(-3.0f64..3.0, 2..40),
        split in 1usize..40,
    ) {
        let n = a.len().min(b.len());
        let (fa, fb) = (maps(&a[..n], split), maps(&b[..n], split));
        let ab = feature_matching(&fa, &fb).unwrap().0;
        let ba = feature_matching(&fb, &fa).unwrap().0;
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert_eq!(feature_matching(&fa, &fa).unwrap().0, 0.0);
    }

    #[test]
    fn hinge_is_zero_exactly_beyond_the_margins(
        real in prop::collection::vec(-3.0f64..3.0, 1..16),
        fake in prop::collection::vec(-3.0f64..3.0, 1..16),
    ) {
        let l = hinge_d_loss(&real, &fake);
        prop_assert!(l >= 0.0);
        let satisfied = real.iter().all(|&r| r >= 1.0) && fake.iter().all(|&f| f <= -1.0);
        prop_assert_eq!(l == 0.0, satisfied);
    }

    #[test]
    fn hinge_gradient_matches_finite_differences(
        real in prop::collection::vec(-3.0f64..3.0, 1..8),
        fake in prop::collection::vec(-3.0f64..3.0, 1..8),
    ) {
        let h = 1e-6;
        prop_assume!(real.iter().chain(&fake).all(|v| (v.abs() - 1.0).abs() > 1e-3));
        let (gr, gf) = hinge_d_grad(&real, &fake);
        for i in 0..real.len() {
            let (mut up, mut dn) = (real.clone(), real.clone());
            up[i] += h;
            dn[i] -= h;
            let num = (hinge_d_loss(&up, &fake) - hinge_d_loss(&dn, &fake)) / (2.0 * h);
            prop_assert!((num - gr[i]).abs() < 1e-6);
            if real[i] > 1.0 {
                prop_assert_eq!(gr[i], 0.0);
            }
        }
        for i in 0..fake.len() {
            let (mut up, mut dn) = (fake.clone(), fake.clone());
            up[i] += h;
            dn[i] -= h;
            let num = (hinge_d_loss(&real, &up) - hinge_d_loss(&real, &dn)) / (2.0 * h);
            prop_assert!((num - gf[i]).abs() < 1e-6);
        }
    }
}
