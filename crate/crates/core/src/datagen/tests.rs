use proptest::prelude::*;

use super::*;
use crate::encoders::{ConceptRenderer, FrozenTextEncoder};

fn world() -> (FrozenTextEncoder, ConceptRenderer) {
    (FrozenTextEncoder::new(16, 4, 3), ConceptRenderer::new([3, 8, 8], 16, 3))
}

fn cfg() -> SyntheticTaskConfig {
    SyntheticTaskConfig {
        num_classes: 6,
        shots_per_class: 3,
        domains: vec![
            StyleParams::neutral(3),
            StyleParams { brightness_shift: 1.0, contrast_scale: 1.0, channel_bias: vec![0.0; 3] },
        ],
        image_shape: [3, 8, 8],
        class_margin: 1.0,
        noise_sigma: 0.2,
        concept_jitter: 0.3,
        seed: 17,
    }
}

fn bytes(ds: &Dataset) -> Vec<u8> {
    let mut b = Vec::new();
    write_dataset(&mut b, ds).unwrap();
    b
}

#[test]
fn counts_follow_the_config() {
    let (t, r) = world();
    let ds = generate_dataset(&cfg(), &t, &r).unwrap();
    assert_eq!(ds.train.len(), 6 * 3 * 2);
    assert_eq!(ds.eval.len(), 6 * 3 * 2);
    assert_eq!(ds.class_names[4], "class_4");
}

#[test]
fn same_seed_same_bytes_even_after_other_work() {
    let (t, r) = world();
    let a = generate_dataset(&cfg(), &t, &r).unwrap();
    let _other = generate_dataset(&SyntheticTaskConfig { seed: 99, ..cfg() }, &t, &r).unwrap();
    let b = generate_dataset(&cfg(), &t, &r).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_ne!(a.train[0].image, a.eval[0].image, "held-out stream must differ from training");
}

#[test]
fn blob_round_trips_and_rejects_garbage() {
    let (t, r) = world();
    let ds = generate_dataset(&cfg(), &t, &r).unwrap();
    let b = bytes(&ds);
    assert_eq!(&b[..5], b"FCSD1");
    assert_eq!(read_dataset(&b[..]).unwrap(), ds);
    assert!(read_dataset(&b[..b.len() - 3]).is_err());
    let mut bad = b.clone();
    bad[4] = b'2';
    assert!(read_dataset(&bad[..]).is_err());
}

#[test]
fn zero_noise_nearest_prototype_is_exact() {
    let (t, r) = world();
    let c = SyntheticTaskConfig { noise_sigma: 0.0, domains: vec![StyleParams::neutral(3)], ..cfg() };
    let ds = generate_dataset(&c, &t, &r).unwrap();
    let protos: Vec<&Tensor> = (0..c.num_classes).map(|k| &ds.train.iter().find(|e| e.label == k).unwrap().image).collect();
    for e in ds.train.iter().chain(&ds.eval) {
        let best = (0..c.num_classes).min_by(|&a, &b| l2(protos[a], &e.image).total_cmp(&l2(protos[b], &e.image))).unwrap();
        assert_eq!(best, e.label);
    }
}

#[test]
fn unsatisfiable_margin_is_a_config_error() {
    let (t, r) = world();
    let c = SyntheticTaskConfig { class_margin: 1e6, ..cfg() };
    assert!(matches!(generate_dataset(&c, &t, &r), Err(DatagenError::Config(_))));
}

#[test]
fn invalid_configs_rejected() {
    assert!(SyntheticTaskConfig { num_classes: 1, ..cfg() }.validate().is_err());
    assert!(SyntheticTaskConfig { shots_per_class: 0, ..cfg() }.validate().is_err());
    assert!(SyntheticTaskConfig { class_margin: 0.0, ..cfg() }.validate().is_err());
    let mut c = cfg();
    c.domains[1].contrast_scale = 0.0;
    assert!(c.validate().is_err());
}

#[test]
fn style_shift_moves_channel_means() {
    let (t, r) = world();
    let ds = generate_dataset(&cfg(), &t, &r).unwrap();
    let channel_mean = |g: usize| {
        let xs: Vec<&Example> = ds.train.iter().filter(|e| e.domain == g).collect();
        let n = xs.len() * 64;
        xs.iter().map(|e| e.image.data()[..64].iter().sum::<f64>()).sum::<f64>() / n as f64
    };
    let diff = channel_mean(1) - channel_mean(0);
    let n = (ds.train.len() / 2 * 64) as f64;
    assert!((diff - 1.0).abs() <= 3.0 * 0.2 / n.sqrt() * 2f64.sqrt() + 1e-12, "diff {diff}");
}

#[test]
fn split_conventions() {
    let (b, n) = base_new_split(&(0..10).collect::<Vec<_>>()).unwrap();
    assert_eq!((b.len(), n.len()), (5, 5));
    let (b, n) = base_new_split(&[4, 0, 2, 1, 3]).unwrap();
    assert_eq!(b, vec![0, 1, 2]);
    assert_eq!(n, vec![3, 4]);
    assert!(base_new_split(&[1]).is_err());
}

#[test]
fn partition_contract() {
    let (t, r) = world();
    let ds = generate_dataset(&SyntheticTaskConfig { num_classes: 8, ..cfg() }, &t, &r).unwrap();
    let (base, _) = base_new_split(&(0..8).collect::<Vec<_>>()).unwrap();
    let shards = partition_clients(&ds, &base, 2).unwrap();
    assert_eq!(shards.len(), 2);
    for s in &shards {
        assert_eq!(s.examples.len(), 2 * 3);
        assert!(s.examples.iter().all(|e| s.class_ids.contains(&e.label) && e.domain == s.domain_id));
    }
    assert_eq!(shards[1].domain_id, 1);
    let union: Vec<usize> = shards.iter().flat_map(|s| s.class_ids.clone()).collect();
    assert_eq!(union, base);
    assert!(matches!(partition_clients(&ds, &base, 3), Err(DatagenError::Config(m)) if m.contains("adjust")));
}

#[test]
fn forty_base_classes_twenty_per_client() {
    let ds = Dataset { image_shape: [1, 1, 1], class_names: (0..80).map(class_name).collect(), num_domains: 1, train: vec![], eval: vec![] };
    let (base, _) = base_new_split(&(0..80).collect::<Vec<_>>()).unwrap();
    assert_eq!(partition_clients(&ds, &base, 20).unwrap().len(), 2);
}

proptest! {
    #[test]
    fn shards_are_pairwise_disjoint(per in 1usize..6, blocks in 1usize..6, domains in 1usize..4) {
        let n = per * blocks;
        let ds = Dataset { image_shape: [1, 1, 1], class_names: (0..n).map(class_name).collect(), num_domains: domains, train: vec![], eval: vec![] };
        let shards = partition_clients(&ds, &(0..n).collect::<Vec<_>>(), per).unwrap();
        prop_assert_eq!(shards.len(), blocks);
        for i in 0..shards.len() {
            for j in i + 1..shards.len() {
                prop_assert!(shards[i].class_ids.iter().all(|c| !shards[j].class_ids.contains(c)));
            }
        }
    }
}
