use proptest::prelude::*;
use xplain_core::io::{read_snapshot, write_snapshot, ContainerError, Manifest, Split};
use xplain_core::nn::{LayerSpec, Network};
use xplain_core::tensor::Shape3;
use xplain_core::training::{ScheduleConfig, Snapshot};

fn snapshot(seed: u64) -> Snapshot {
    let input = Shape3::new(1, 6, 6);
    let layers = vec![
        LayerSpec::conv(1, 3, 3, 1, 1),
        LayerSpec::Relu,
        LayerSpec::max_pool(2, 2),
        LayerSpec::GlobalAvgPool,
        LayerSpec::dense(3, 3),
        LayerSpec::Softmax,
    ];
    Snapshot {
        network: Network::new(input, layers, seed).unwrap(),
        cycle: 2,
        epoch: 7,
        val_loss: 0.25,
        val_acc: 0.5,
        schedule: ScheduleConfig { alpha0: 0.5, total_epochs: 8, cycles: 2 },
    }
}

fn manifest() -> impl Strategy<Value = Manifest> {
    let row = ("[a-z]{1,6}(/[a-z0-9_]{1,6}){0,2}\\.png", "[a-z]{1,8}", prop::option::of(any::<bool>()));
    (prop::collection::vec(row, 1..20), any::<bool>()).prop_map(|(rows, with_split)| {
        let mut m = Manifest::default();
        for (path, label, split) in rows {
            let split = if with_split { Some(if split.unwrap_or(false) { Split::Test } else { Split::Train }) } else { None };
            let _ = m.push(&path, &label, split);
        }
        m
    })
}

proptest! {
    #[test]
    fn manifest_round_trips(m in manifest()) {
        let mut buf = Vec::new();
        m.write(&mut buf).unwrap();
        let back = Manifest::parse(buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(Manifest::parse(buf.as_slice()).unwrap().label_ids(), m.label_ids());
    }

    #[test]
    fn truncated_snapshots_are_rejected(seed in 0u64..1000, cut in 1usize..400) {
        let mut buf = Vec::new();
        write_snapshot(&snapshot(seed), &mut buf).unwrap();
        let cut = cut.min(buf.len());
        prop_assert!(read_snapshot(&buf[..buf.len() - cut]).is_err());
    }

    #[test]
    fn other_versions_are_refused(seed in 0u64..1000, version in 2u32..u32::MAX) {
        let mut buf = Vec::new();
        write_snapshot(&snapshot(seed), &mut buf).unwrap();
        buf[4..8].copy_from_slice(&version.to_le_bytes());
        prop_assert!(matches!(read_snapshot(buf.as_slice()), Err(ContainerError::VersionUnsupported(v)) if v == version));
    }
}

#[test]
fn blob_cut_reports_truncation() {
    let mut buf = Vec::new();
    write_snapshot(&snapshot(1), &mut buf).unwrap();
    let err = read_snapshot(&buf[..buf.len() - 4]).unwrap_err();
    assert!(matches!(err, ContainerError::TruncatedBlob { .. }), "{err}");
}

#[test]
fn snapshot_round_trip_is_bit_exact() {
    let s = snapshot(9);
    let mut buf = Vec::new();
    write_snapshot(&s, &mut buf).unwrap();
    let back = read_snapshot(buf.as_slice()).unwrap();
    let bits = |n: &Network| n.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back.network), bits(&s.network));
    assert_eq!(back, s);
}
