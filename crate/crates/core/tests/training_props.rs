use proptest::prelude::*;
use xplain_core::nn::{LayerSpec, Network};
use xplain_core::tensor::{Shape3, Tensor4};
use xplain_core::training::{
    cosine_annealing_lr, sgd_update, train_with_snapshots, Capture, LabeledData, ScheduleConfig, TrainConfig,
};

fn valid_schedule() -> impl Strategy<Value = ScheduleConfig> {
    (1e-3f64..2.0, 1usize..80, 1usize..80)
        .prop_map(|(alpha0, total_epochs, cycles)| ScheduleConfig { alpha0, total_epochs, cycles })
        .prop_filter("realizable", |s| s.validate().is_ok())
}

fn tiny_problem(n: usize) -> (Network, LabeledData) {
    let input = Shape3::new(1, 4, 4);
    let layers = vec![
        LayerSpec::conv(1, 2, 3, 1, 1),
        LayerSpec::Relu,
        LayerSpec::GlobalAvgPool,
        LayerSpec::dense(2, 2),
        LayerSpec::Softmax,
    ];
    let net = Network::new(input, layers, 3).unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let data: Vec<f32> = labels
        .iter()
        .enumerate()
        .flat_map(|(i, &l)| (0..16).map(move |j| if (j < 8) == (l == 0) { 1.0 } else { ((i * 7 + j) % 5) as f32 / 10.0 }))
        .collect();
    (net, LabeledData::new(Tensor4::from_vec(n, input, data).unwrap(), labels).unwrap())
}

proptest! {
    #[test]
    fn lr_stays_in_range_and_repeats(s in valid_schedule()) {
        let len = s.cycle_len();
        prop_assert_eq!(cosine_annealing_lr(1, &s).unwrap(), s.alpha0);
        for t in 1..=s.total_epochs {
            let lr = cosine_annealing_lr(t, &s).unwrap();
            prop_assert!(lr > 0.0 && lr <= s.alpha0);
            if t + len <= s.total_epochs {
                prop_assert_eq!(lr, cosine_annealing_lr(t + len, &s).unwrap());
            }
        }
    }

    #[test]
    fn sgd_step_descends_a_quadratic(
        p in prop::collection::vec(-10.0f32..10.0, 1..20),
        lr in 0.01f64..1.0,
    ) {
        prop_assume!(p.iter().any(|&v| v.abs() > 1e-3));
        let loss = |v: &[f32]| v.iter().map(|&x| 0.5 * f64::from(x).powi(2)).sum::<f64>();
        let mut q = p.clone();
        sgd_update(&mut q, &p, lr, 0.0).unwrap();
        prop_assert!(loss(&q) < loss(&p));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn one_snapshot_per_cycle(total in 1usize..12, cycles in 1usize..12, last in any::<bool>()) {
        let schedule = ScheduleConfig { alpha0: 0.1, total_epochs: total, cycles };
        prop_assume!(schedule.validate().is_ok());
        let (net, data) = tiny_problem(12);
        let capture = if last { Capture::LastEpoch } else { Capture::BestInFinalQuarter };
        let cfg = TrainConfig { schedule, batch_size: 4, capture, ..TrainConfig::default() };
        let run = train_with_snapshots(&net, &data, &cfg).unwrap();
        prop_assert_eq!(run.snapshots.len(), cycles);
        for (i, s) in run.snapshots.iter().enumerate() {
            prop_assert_eq!(s.cycle, i + 1);
            prop_assert_eq!(schedule.cycle_of(s.epoch), i);
            let end = ((i + 1) * schedule.cycle_len()).min(total);
            prop_assert!(s.epoch <= end);
            if last {
                prop_assert_eq!(s.epoch, end);
            }
        }
    }
}

#[test]
fn training_is_bit_reproducible() {
    let (net, data) = tiny_problem(24);
    let cfg = TrainConfig {
        schedule: ScheduleConfig { alpha0: 0.2, total_epochs: 6, cycles: 3 },
        batch_size: 5,
        dropout: None,
        seed: 17,
        augment_max_deg: 10.0,
        ..TrainConfig::default()
    };
    let a = train_with_snapshots(&net, &data, &cfg).unwrap();
    let b = train_with_snapshots(&net, &data, &cfg).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.snapshots, b.snapshots);
    let c = train_with_snapshots(&net, &data, &TrainConfig { seed: 18, ..cfg }).unwrap();
    assert_ne!(a.snapshots[2].network.flat_params(), c.snapshots[2].network.flat_params());
}
