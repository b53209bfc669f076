use gaitgraph::augment::normalize_coords;
use gaitgraph::dataset::{parse_pose_csv, write_pose_csv, Condition, PoseSequence, SequenceKey};
use gaitgraph::eval::{rank1_cross_view, Embedding, EmbeddingGallery};
use gaitgraph::loss::supcon_loss;
use gaitgraph::model::{GaitModel, ModelSpec};
use gaitgraph::nn::{GlobalAvgPool, Module};
use gaitgraph::optim::{adam_step, AdamState};
use gaitgraph::skeleton::{normalize_adjacency, spatial_partition, SkeletonTopology, SquareMatrix};
use gaitgraph::tensor::{ParamKind, Parameter, Tensor};
use proptest::prelude::*;

mod common;
use common::{rank1_oracle, supcon_oracle, unit_rows};

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

fn symmetric_graph() -> impl Strategy<Value = SquareMatrix> {
    (1usize..=6).prop_flat_map(|n| {
        proptest::collection::vec(any::<bool>(), n * (n - 1) / 2).prop_map(move |bits| {
            let mut a = SquareMatrix::zeros(n);
            let mut k = 0;
            for i in 0..n {
                for j in i + 1..n {
                    if bits[k] {
                        a[(i, j)] = 1.0;
                        a[(j, i)] = 1.0;
                    }
                    k += 1;
                }
            }
            a
        })
    })
}

/// Random tree on `n` joints rooted at joint 0.
fn tree_topology() -> impl Strategy<Value = SkeletonTopology> {
    (2usize..=10)
        .prop_flat_map(|n| proptest::collection::vec(any::<prop::sample::Index>(), n - 1))
        .prop_map(|parents| {
            let n = parents.len() + 1;
            let edges = parents.iter().enumerate().map(|(i, p)| (p.index(i + 1), i + 1)).collect();
            SkeletonTopology::new((0..n).map(|i| format!("j{i}")).collect(), edges, vec![], vec![0]).unwrap()
        })
}

fn key(subject: u32, view: u32) -> SequenceKey {
    SequenceKey { subject, condition: Condition::Nm, seq: 1, view }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_adjacency_commutes_with_relabeling(
        (a, perm) in symmetric_graph().prop_flat_map(|a| { let n = a.size(); (Just(a), permutation(n)) })
    ) {
        let lhs = normalize_adjacency(&a.permuted(&perm)).unwrap();
        let rhs = normalize_adjacency(&a).unwrap().permuted(&perm);
        prop_assert_eq!(&lhs, &rhs);
        prop_assert!(lhs.is_symmetric());
        prop_assert!(lhs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn partition_masks_are_disjoint_and_cover_the_self_loop_graph(topology in tree_topology()) {
        let set = spatial_partition(&topology).unwrap();
        let n = topology.num_joints();
        let target = topology.adjacency().add(&SquareMatrix::identity(n));
        let mut sum = SquareMatrix::zeros(n);
        for m in &set.masks {
            for (s, &v) in sum.data().to_vec().iter().zip(m.data()) {
                prop_assert!(!(*s > 0.0 && v > 0.0), "masks overlap");
            }
            sum = sum.add(m);
        }
        prop_assert_eq!(sum, target);
    }

    #[test]
    fn supcon_is_nonnegative_and_order_free(
        seed in any::<u64>(),
        labels in proptest::collection::vec(0u32..4, 2..12),
        perm_seed in any::<u64>(),
    ) {
        let b = labels.len();
        let f = unit_rows(b, 5, seed);
        let tau = 0.3;
        let (loss, _) = supcon_loss(&f, &labels, tau).unwrap();
        prop_assert!(loss >= 0.0);

        let perm = common::shuffled(b, perm_seed);
        let mut pf = vec![0.0; b * 5];
        let mut pl = vec![0; b];
        for (i, &p) in perm.iter().enumerate() {
            pf[i * 5..(i + 1) * 5].copy_from_slice(&f.data()[p * 5..(p + 1) * 5]);
            pl[i] = labels[p];
        }
        let (permuted, _) = supcon_loss(&Tensor::from_vec(&[b, 5], pf).unwrap(), &pl, tau).unwrap();
        prop_assert!((loss - permuted).abs() < 1e-9 * loss.max(1.0));

        let rotated = common::rotate(&f, seed ^ 7);
        let (rot, _) = supcon_loss(&rotated, &labels, tau).unwrap();
        prop_assert!((loss - rot).abs() < 1e-9 * loss.max(1.0));

        let oracle = supcon_oracle(f.data(), 5, &labels, tau);
        prop_assert!((loss - oracle).abs() < 1e-6);
    }

    #[test]
    fn supcon_tends_to_uniform_softmax(seed in any::<u64>(), labels in proptest::collection::vec(0u32..3, 3..10)) {
        let b = labels.len();
        let anchors = (0..b).filter(|&i| (0..b).any(|j| j != i && labels[j] == labels[i])).count();
        prop_assume!(anchors > 0);
        let (loss, _) = supcon_loss(&unit_rows(b, 4, seed), &labels, 1e6).unwrap();
        prop_assert!((loss - ((b - 1) as f64).ln()).abs() < 1e-3);
    }

    #[test]
    fn rank1_matches_oracle_and_invariances(seed in any::<u64>(), subjects in 1u32..=6, views in 1u32..=4) {
        let (gallery, probes) = common::random_galleries(subjects, views, 4, seed);
        let table = rank1_cross_view(&gallery, &probes).unwrap();
        prop_assert_eq!(&table.accuracy, &rank1_oracle(&gallery, &probes));

        let relabel = |g: &EmbeddingGallery| EmbeddingGallery::new(g.entries.iter().map(|e| Embedding {
            key: SequenceKey { subject: 1000 - e.key.subject, ..e.key },
            feature: e.feature.clone(),
        }).collect()).unwrap();
        prop_assert_eq!(&rank1_cross_view(&relabel(&gallery), &relabel(&probes)).unwrap(), &table);

        let mut dup = gallery.entries.clone();
        dup.push(gallery.entries[seed as usize % gallery.len()].clone());
        prop_assert_eq!(&rank1_cross_view(&EmbeddingGallery::new(dup).unwrap(), &probes).unwrap(), &table);

        let (rg, rp) = common::rotate_galleries(&gallery, &probes, seed);
        prop_assert_eq!(&rank1_cross_view(&rg, &rp).unwrap(), &table);
    }

    #[test]
    fn adam_update_is_odd(values in proptest::collection::vec(-2.0f64..2.0, 1..8), seed in any::<u64>()) {
        let n = values.len();
        let grads = common::normal(n, seed);
        let run = |sign: f64| {
            let t = Tensor::from_vec(&[n], values.iter().map(|v| sign * v).collect()).unwrap().with_grad();
            let mut p = Parameter::new("w", t, ParamKind::Weight);
            let mut state = AdamState::new(n);
            for step in 0..3 {
                p.grad_mut().iter_mut().zip(&grads).for_each(|(g, &v)| *g = sign * v * (step + 1) as f64);
                adam_step(&mut p, &mut state, 0.01, 0.0).unwrap();
            }
            p.values().to_vec()
        };
        let plus = run(1.0);
        let minus = run(-1.0);
        for (a, b) in plus.iter().zip(&minus) {
            prop_assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn pooling_is_homogeneous(seed in any::<u64>(), c in -4.0f64..4.0) {
        let x = Tensor::from_vec(&[2, 3, 4, 5], common::normal(120, seed)).unwrap();
        let pool = GlobalAvgPool::new();
        let lhs = Module::<f64>::infer(&pool, &x.scale(c)).unwrap();
        let rhs = Module::<f64>::infer(&pool, &x).unwrap().scale(c);
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn csv_round_trip_at_six_decimals(values in proptest::collection::vec(-5_000_000_000i64..5_000_000_000, 51..=51 * 4)) {
        let frames = values.len() / 51;
        // every third value is a confidence in [0, 1]
        let data: Vec<f64> = values[..frames * 51]
            .iter()
            .enumerate()
            .map(|(i, &v)| if i % 3 == 2 { v.rem_euclid(1_000_001) as f64 / 1e6 } else { v as f64 / 1e6 })
            .collect();
        let seq = PoseSequence::new(key(1, 0), 17, data.clone()).unwrap();
        let back = parse_pose_csv(&write_pose_csv(&seq)).unwrap();
        prop_assert_eq!(back.len(), data.len());
        for (a, b) in back.iter().zip(&data) {
            prop_assert!((a - b).abs() <= 5e-7, "{} vs {}", a, b);
        }
    }

    #[test]
    fn normalization_ignores_translation_and_scale(seed in any::<u64>(), dx in -500.0f64..500.0, dy in -500.0f64..500.0, s in 0.05f64..20.0) {
        let mut data = common::normal(6 * 51, seed);
        data.chunks_mut(3).for_each(|j| j[2] = 0.9);
        let seq = PoseSequence::new(key(1, 0), 17, data.clone()).unwrap();
        let moved: Vec<f64> = data.chunks(3).flat_map(|j| [s * j[0] + dx, s * j[1] + dy, j[2]]).collect();
        let a = normalize_coords(&seq).unwrap();
        let b = normalize_coords(&seq.with_data(moved)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn embedding_ignores_joint_order(perm in permutation(17), seed in any::<u64>()) {
        let topology = SkeletonTopology::coco17();
        let spec = ModelSpec::resgcn_n39_r8().scaled(8);
        let mut model = GaitModel::<f64>::new(&spec, &topology, seed % 1000).unwrap();
        let x = Tensor::from_vec(&[2, 12, 17, 3], common::normal(2 * 12 * 51, seed)).unwrap();
        let before = model.infer(&x).unwrap();

        let mut px = vec![0.0; x.len()];
        for bt in 0..24 {
            for (old, &new) in perm.iter().enumerate() {
                let (src, dst) = ((bt * 17 + old) * 3, (bt * 17 + new) * 3);
                px[dst..dst + 3].copy_from_slice(&x.data()[src..src + 3]);
            }
        }
        model.set_topology(&topology.permuted(&perm).unwrap()).unwrap();
        let after = model.infer(&Tensor::from_vec(x.shape(), px).unwrap()).unwrap();
        for (a, b) in before.data().iter().zip(after.data()) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }
}
