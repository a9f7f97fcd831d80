use proptest::prelude::*;

use coslearn::embeddings::EmbeddingMatrix;
use coslearn::hierarchy::ClassHierarchy;
use coslearn::losses::{cosine_similarity, LossKind, LossSpec};
use coslearn::optim::{clip_gradients, global_norm, ClipSpec, SgdrSchedule};
use coslearn::stats::welch_t_test;
use coslearn::{make_blobs, verify_embeddings, BlobSpec, Tape, Tensor};

fn row(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, len)
}

fn nonzero_row(len: usize) -> impl Strategy<Value = Vec<f64>> {
    row(len).prop_filter("norm away from 0", |v| {
        v.iter().map(|x| x * x).sum::<f64>() > 1e-6
    })
}

/// Random rooted tree as an edge list: node `i > 0` hangs below a node in `0..i`.
fn tree_text() -> impl Strategy<Value = String> {
    (2usize..90)
        .prop_flat_map(|n| prop::collection::vec(any::<prop::sample::Index>(), n - 1))
        .prop_map(|picks| {
            let mut text = String::new();
            for (i, p) in picks.iter().enumerate() {
                let child = i + 1;
                text.push_str(&format!("n{}\tn{}\n", p.index(child), child));
            }
            text
        })
        .prop_filter("2..=64 leaves", |text| {
            ClassHierarchy::parse(text, None)
                .map(|h| (2..=64).contains(&h.num_classes()))
                .unwrap_or(false)
        })
}

fn cosine_loss_of(f: &[f64], target: usize, n: usize) -> f64 {
    let e = EmbeddingMatrix::onehot(n).unwrap();
    let spec = LossSpec::new(LossKind::Cosine, n).unwrap();
    spec.evaluate(
        &Tensor::matrix(1, n, f.to_vec()).unwrap(),
        &[target],
        &e,
        None,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(v in row(6), c in -50.0f64..50.0) {
        let t = Tensor::matrix(1, 6, v.clone()).unwrap();
        let s = t.softmax();
        prop_assert!((s.sum() - 1.0).abs() < 1e-12);
        let shifted = t.map(|x| x + c).softmax();
        for (a, b) in s.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_is_unit_and_scale_free(v in nonzero_row(5), alpha in 1e-3f64..1e3) {
        let t = Tensor::vector(v.clone());
        let u = t.l2_normalize().unwrap();
        prop_assert!((u.l2_norm() - 1.0).abs() < 1e-12);
        let scaled = t.scale(alpha).l2_normalize().unwrap();
        for (a, b) in u.data().iter().zip(scaled.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_twice_is_identical(v in nonzero_row(4)) {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::matrix(1, 4, v).unwrap());
        let n = tape.l2_normalize(p).unwrap();
        let s = tape.softmax(n).unwrap();
        let l = tape.sum(s).unwrap();
        let a = tape.backward(l).unwrap();
        let b = tape.backward(l).unwrap();
        prop_assert_eq!(a.wrt(p), b.wrt(p));
    }

    #[test]
    fn cosine_loss_is_bounded_and_scale_invariant(
        f in nonzero_row(4),
        target in 0usize..4,
        exp in -6i32..=6,
    ) {
        let l = cosine_loss_of(&f, target, 4);
        prop_assert!((0.0..=2.0).contains(&l));
        let alpha = 10f64.powi(exp);
        let scaled: Vec<f64> = f.iter().map(|x| x * alpha).collect();
        prop_assert!((cosine_loss_of(&scaled, target, 4) - l).abs() < 1e-12);
    }

    #[test]
    fn cosine_loss_matches_similarity_and_sphere_distance(f in nonzero_row(3), target in 0usize..3) {
        let l = cosine_loss_of(&f, target, 3);
        let mut phi = vec![0.0; 3];
        phi[target] = 1.0;
        prop_assert!((1.0 - cosine_similarity(&f, &phi).unwrap() - l).abs() < 1e-12);
        let psi = Tensor::vector(f.clone()).l2_normalize().unwrap();
        let d2: f64 = psi.data().iter().zip(&phi).map(|(a, b)| (a - b).powi(2)).sum();
        prop_assert!((d2 - 2.0 * l).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_ignores_logit_shifts(z in row(5), c in -20.0f64..20.0, y in 0usize..5) {
        let e = EmbeddingMatrix::onehot(5).unwrap();
        let spec = LossSpec::new(LossKind::CrossEntropy, 5).unwrap();
        let a = spec.evaluate(&Tensor::matrix(1, 5, z.clone()).unwrap(), &[y], &e, None).unwrap();
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let b = spec.evaluate(&Tensor::matrix(1, 5, shifted).unwrap(), &[y], &e, None).unwrap();
        prop_assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn zero_smoothing_is_plain_cross_entropy(z in row(4), y in 0usize..4) {
        let e = EmbeddingMatrix::onehot(4).unwrap();
        let plain = LossSpec::new(LossKind::CrossEntropy, 4).unwrap();
        let smooth0 = plain.with_label_smoothing(0.0).unwrap();
        let f = Tensor::matrix(1, 4, z).unwrap();
        prop_assert_eq!(
            plain.evaluate(&f, &[y], &e, None).unwrap(),
            smooth0.evaluate(&f, &[y], &e, None).unwrap()
        );
    }

    #[test]
    fn semantic_embeddings_reproduce_random_trees(text in tree_text()) {
        let h = ClassHierarchy::parse(&text, None).unwrap();
        let s = h.semantic_similarity().unwrap();
        prop_assert!(s.is_symmetric());
        for i in 0..s.len() {
            prop_assert_eq!(s.get(i, i), 1.0);
        }
        prop_assert!(s.min_eigenvalue() >= -1e-9);
        let e = EmbeddingMatrix::semantic(&s).unwrap();
        let r = verify_embeddings(&e, &s).unwrap();
        prop_assert!(r.max_gram_deviation < 1e-6, "{}", r.max_gram_deviation);
        prop_assert!(r.max_norm_deviation < 1e-9);
        prop_assert_eq!(EmbeddingMatrix::semantic(&s).unwrap(), e);
    }

    #[test]
    fn relabeling_permutes_the_gram_matrix(text in tree_text(), seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        let h = ClassHierarchy::parse(&text, None).unwrap();
        let s = h.semantic_similarity().unwrap();
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let names: Vec<String> = order.iter().map(|&i| s.names()[i].clone()).collect();
        let hp = ClassHierarchy::parse(&text, Some(&names)).unwrap();
        let sp = hp.semantic_similarity().unwrap();
        prop_assert_eq!(&sp, &s.permuted(&order));
        let e = EmbeddingMatrix::semantic(&s).unwrap();
        let ep = EmbeddingMatrix::semantic(&sp).unwrap();
        let (g, gp) = (e.gram(), ep.gram());
        let n = s.len();
        for i in 0..n {
            for j in 0..n {
                prop_assert!((gp[i * n + j] - g[order[i] * n + order[j]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn deeper_lca_means_higher_similarity(text in tree_text()) {
        let h = ClassHierarchy::parse(&text, None).unwrap();
        let s = h.semantic_similarity().unwrap();
        let classes = h.classes();
        for i in 0..classes.len() {
            for j in 0..classes.len() {
                for k in 0..classes.len() {
                    let hij = h.node_height(h.lca(classes[i], classes[j]).unwrap()).unwrap();
                    let hik = h.node_height(h.lca(classes[i], classes[k]).unwrap()).unwrap();
                    if hij < hik {
                        prop_assert!(s.get(i, j) > s.get(i, k));
                    }
                }
            }
        }
    }

    #[test]
    fn schedule_hits_bounds_and_stays_in_range(
        lr_max in 1e-3f64..3.0,
        base in 1usize..6,
        cycles in 1usize..5,
        steps in 1usize..8,
    ) {
        let s = SgdrSchedule::new(lr_max).with_cycles(base, cycles);
        let mut start = 0;
        for len in s.cycle_lengths() {
            prop_assert!((s.lr_at(start, 0, steps).unwrap() - lr_max).abs() < 1e-12);
            prop_assert!((s.annealed(len as f64, len as f64) - s.lr_min).abs() < 1e-12);
            start += len;
        }
        prop_assert_eq!(start, s.total_epochs());
        for epoch in 0..s.total_epochs() {
            for step in 0..steps {
                let lr = s.lr_at(epoch, step, steps).unwrap();
                prop_assert!(lr >= s.lr_min && lr <= lr_max);
            }
        }
    }

    #[test]
    fn clipping_never_grows_and_keeps_direction(
        a in prop::collection::vec(-100.0f64..100.0, 1..6),
        b in prop::collection::vec(-100.0f64..100.0, 1..6),
        max_norm in 0.1f64..50.0,
    ) {
        let orig = vec![Tensor::vector(a), Tensor::vector(b)];
        let mut g = orig.clone();
        let before = clip_gradients(&mut g, ClipSpec { max_norm }).unwrap();
        let after = global_norm(&g);
        prop_assert!(after <= before.max(max_norm) * (1.0 + 1e-12));
        prop_assert!(after <= max_norm * (1.0 + 1e-12) || before <= max_norm);
        let scale = if before > max_norm { max_norm / before } else { 1.0 };
        for (o, c) in orig.iter().zip(&g) {
            for (x, y) in o.data().iter().zip(c.data()) {
                prop_assert!((x * scale - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn subsample_is_balanced_and_deterministic(k in 1usize..5, seed in any::<u64>()) {
        let (train, test) = make_blobs(&BlobSpec {
            n_classes: 3, dim: 3, samples_per_class: 10, spread: 0.5, separation: 1.0, seed: 1,
        }, None).unwrap();
        let a = train.subsample(k, seed).unwrap();
        prop_assert_eq!(a.class_counts(), vec![k; 3]);
        prop_assert_eq!(&a, &train.subsample(k, seed).unwrap());
        prop_assert_eq!(test.len(), 15);
    }

    #[test]
    fn batches_cover_every_pass_once(n in 1usize..40, extra in 0usize..80, bs in 1usize..17, seed in any::<u64>()) {
        let full = n + extra;
        let batches = coslearn::data::batch_indices(n, full, bs, seed).unwrap();
        let passes = coslearn::data::repeats_per_epoch(n, full);
        prop_assert_eq!(passes, full.div_ceil(n));
        let per_pass = n.div_ceil(bs);
        prop_assert_eq!(batches.len(), passes * per_pass);
        for pass in batches.chunks(per_pass) {
            let mut seen: Vec<usize> = pass.iter().flatten().copied().collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn welch_is_antisymmetric(
        a in prop::collection::vec(0.0f64..1.0, 2..12),
        b in prop::collection::vec(0.0f64..1.0, 2..12),
    ) {
        let ab = welch_t_test(&a, &b).unwrap();
        let ba = welch_t_test(&b, &a).unwrap();
        prop_assert!((ab.t + ba.t).abs() < 1e-12);
        prop_assert!((ab.p_two_sided - ba.p_two_sided).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab.p_two_sided));
    }
}
