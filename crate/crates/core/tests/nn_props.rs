mod oracle;

use proptest::prelude::*;
use xplain_core::nn::{conv_out, cross_entropy_weighted, softmax, LayerSpec, Mode, Network};
use xplain_core::tensor::{Shape3, Tensor4};

use oracle::{random_input, random_net, RefNet};

proptest! {
    #[test]
    fn softmax_is_a_distribution(scores in prop::collection::vec(-40.0f32..40.0, 1..12)) {
        let p = softmax(&scores);
        let sum: f64 = p.iter().map(|&v| f64::from(v)).sum();
        prop_assert!((sum - 1.0).abs() <= 1e-6);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let arg = |v: &[f32]| (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
        let top = arg(&scores);
        prop_assert!(scores[arg(&p)] == scores[top]);
    }

    #[test]
    fn conv_dims_follow_the_formula(len in 1usize..40, k in 1usize..6, s in 1usize..4, p in 0usize..3) {
        let expected = (len + 2 * p >= k).then(|| (len + 2 * p - k) / s + 1);
        prop_assert_eq!(conv_out(len, k, s, p), expected);
        let spec = LayerSpec::conv(1, 2, k, s, p);
        match (spec.output_shape(Shape3::new(1, len, len)), expected) {
            (Ok(out), Some(e)) => prop_assert_eq!((out.c, out.h, out.w), (2, e, e)),
            (Err(_), None) => {}
            (got, e) => prop_assert!(false, "{got:?} vs {e:?}"),
        }
    }

    #[test]
    fn weighted_loss_scales_per_sample(
        logits in prop::collection::vec(-5.0f32..5.0, 3),
        label in 0usize..3,
        w in prop::collection::vec(0.1f32..10.0, 3),
    ) {
        let p = softmax(&logits);
        let plain = cross_entropy_weighted(&p, label, &[1.0; 3]).unwrap();
        let weighted = cross_entropy_weighted(&p, label, &w).unwrap();
        prop_assert!((weighted - f64::from(w[label]) * plain).abs() <= 1e-9 * weighted.abs().max(1.0));
    }
}

#[test]
fn eval_forward_is_bit_deterministic() {
    for seed in 0..10 {
        let net = random_net(seed, false);
        let x = Tensor4::from_vec(3, net.input_shape(), random_input(seed, 3, net.input_shape())).unwrap();
        let a = net.forward(&x, Mode::Eval, 1).unwrap();
        let b = net.forward(&x, Mode::Eval, 2).unwrap();
        assert_eq!(a.posterior(), b.posterior());
        let t1 = net.forward(&x, Mode::Train, 9).unwrap();
        let t2 = net.forward(&x, Mode::Train, 9).unwrap();
        assert_eq!(t1.posterior(), t2.posterior());
    }
}

#[test]
fn forward_matches_nested_loop_reference() {
    let input = Shape3::new(2, 9, 9);
    let layers = vec![
        LayerSpec::conv(2, 4, 3, 1, 1),
        LayerSpec::Relu,
        LayerSpec::conv(4, 3, 3, 2, 0),
        LayerSpec::Relu,
        LayerSpec::GlobalAvgPool,
        LayerSpec::dense(3, 3),
        LayerSpec::Softmax,
    ];
    for seed in 0..5 {
        let net = Network::new(input, layers.clone(), seed).unwrap();
        let x = random_input(seed + 50, 2, input);
        let batch = Tensor4::from_vec(2, input, x.clone()).unwrap();
        let cache = net.forward(&batch, Mode::Eval, 0).unwrap();
        let reference = RefNet::new(&net);
        let x64: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
        let (acts, _) = reference.run_from(0, x64, 2);
        for i in [1, 3] {
            let got = cache.activation(i).as_slice();
            let max = got.iter().zip(&acts[i]).map(|(&a, b)| (f64::from(a) - b).abs()).fold(0.0, f64::max);
            assert!(max <= 1e-5, "seed {seed} layer {i}: {max}");
        }
    }
}

#[test]
fn posterior_rows_sum_to_one() {
    for seed in 0..10 {
        let net = random_net(seed, false);
        let x = Tensor4::from_vec(4, net.input_shape(), random_input(seed, 4, net.input_shape())).unwrap();
        let cache = net.forward(&x, Mode::Eval, 0).unwrap();
        for n in 0..4 {
            let s: f64 = cache.sample_posterior(n).iter().map(|&v| f64::from(v)).sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }
}
