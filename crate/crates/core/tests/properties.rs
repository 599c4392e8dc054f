use proptest::prelude::*;

use mcml::adaption::blend;
use mcml::corpus::{generate_synthetic, sample_episode, BioTag, SyntheticSpec};
use mcml::diffmath::{softmax, ParamStore};
use mcml::harness::{checkpoint_text, parse_checkpoint, span_f1, spans_from_bio};
use mcml::memory::{pair_distance, ContrastiveConfig, MemoryStore, SignMode};
use mcml::protonet::{classify, compute_prototype_values, PrototypeSet};

const POOL: [&str; 6] = ["O", "B-x", "I-x", "B-y", "I-y", "O"];

fn tags() -> impl Strategy<Value = Vec<BioTag>> {
    prop::collection::vec(prop::sample::select(POOL.to_vec()), 0..12)
        .prop_map(|v| v.into_iter().map(|s| s.parse().unwrap()).collect())
}

fn vector(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, d)
}

fn nonzero(d: usize) -> impl Strategy<Value = Vec<f64>> {
    vector(d).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

proptest! {
    #[test]
    fn spans_are_ordered_disjoint_and_reencode(t in tags()) {
        let spans = spans_from_bio(&t);
        let mut last_end = 0;
        for s in &spans {
            prop_assert!(s.start >= last_end && s.start < s.end && s.end <= t.len());
            prop_assert!(t[s.start..s.end].iter().all(|x| !x.is_outside() && x.slot() == s.slot));
            last_end = s.end;
        }
        // writing the spans back as strict BIO gives the same spans
        let mut strict = vec![BioTag::outside(); t.len()];
        for s in &spans {
            strict[s.start] = BioTag::begin(s.slot.clone());
            for x in &mut strict[s.start + 1..s.end] {
                *x = BioTag::inside(s.slot.clone());
            }
        }
        prop_assert_eq!(spans_from_bio(&strict), spans);
    }

    #[test]
    fn f1_is_bounded_and_perfect_on_identity(p in prop::collection::vec(tags(), 1..4), g in prop::collection::vec(tags(), 1..4)) {
        let n = p.len().min(g.len());
        let ps: Vec<_> = p[..n].iter().map(|t| spans_from_bio(t)).collect();
        let gs: Vec<_> = g[..n].iter().map(|t| spans_from_bio(t)).collect();
        let s = span_f1(&ps, &gs);
        for v in [s.precision, s.recall, s.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let swapped = span_f1(&gs, &ps);
        prop_assert_eq!(swapped.precision, s.recall);
        prop_assert_eq!(swapped.f1, s.f1);
        let same = span_f1(&gs, &gs);
        let any = gs.iter().any(|x| !x.is_empty());
        prop_assert_eq!(same.f1, if any { 1.0 } else { 0.0 });
    }

    #[test]
    fn prototypes_are_order_free_and_inside_the_hull(
        rows in prop::collection::vec((vector(4), 0..3usize), 1..20),
        rot in 0..20usize,
    ) {
        let labels: Vec<BioTag> = ["O", "B-a", "B-b"].iter().map(|s| s.parse().unwrap()).collect();
        let emb: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
        let lab: Vec<BioTag> = rows.iter().map(|r| labels[r.1].clone()).collect();
        let present: Vec<BioTag> = labels.iter().filter(|l| lab.contains(l)).cloned().collect();
        let a = compute_prototype_values(&emb, &lab, &present, 0).unwrap();
        let k = rot % emb.len();
        let (mut e2, mut l2) = (emb.clone(), lab.clone());
        e2.rotate_left(k);
        l2.rotate_left(k);
        let b = compute_prototype_values(&e2, &l2, &present, 0).unwrap();
        for ((l, pa), pb) in a.labels.iter().zip(&a.prototypes).zip(&b.prototypes) {
            let members: Vec<&Vec<f64>> = emb.iter().zip(&lab).filter(|(_, x)| *x == l).map(|(v, _)| v).collect();
            for c in 0..4 {
                let lo = members.iter().map(|v| v[c]).fold(f64::INFINITY, f64::min);
                let hi = members.iter().map(|v| v[c]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(pa[c] >= lo - 1e-12 && pa[c] <= hi + 1e-12);
                prop_assert!((pa[c] - pb[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn insertion_keeps_old_records_and_centroids(
        episodes in prop::collection::vec(prop::collection::vec((0..4usize, vector(3)), 1..4), 1..6),
    ) {
        let names = ["B-a", "B-b", "I-a", "O"];
        let cfg = ContrastiveConfig::default();
        let mut store = MemoryStore::new();
        for (id, ep) in episodes.iter().enumerate() {
            let mut set = PrototypeSet { episode_id: id as u64, labels: vec![], prototypes: vec![], counts: vec![] };
            for (l, v) in ep {
                let tag: BioTag = names[*l].parse().unwrap();
                if !set.labels.contains(&tag) {
                    set.labels.push(tag);
                    set.prototypes.push(v.clone());
                    set.counts.push(1);
                }
            }
            let before = store.records().to_vec();
            store.insert(&set, &cfg).unwrap();
            prop_assert_eq!(&store.records()[..before.len()], before.as_slice());
        }
        for l in store.labels() {
            let recs: Vec<_> = store.records().iter().filter(|r| &r.label == l).collect();
            let c = store.centroid(l).unwrap();
            for i in 0..3 {
                let mean = recs.iter().map(|r| r.embedding[i]).sum::<f64>() / recs.len() as f64;
                prop_assert!((c[i] - mean).abs() < 1e-12);
            }
        }
        prop_assert!(store.records().iter().all(|r| !r.label.is_outside()));
    }

    #[test]
    fn pair_distance_is_bounded_and_the_modes_are_complementary(a in nonzero(5), b in nonzero(5)) {
        let lit = pair_distance(&a, &b, SignMode::Literal).unwrap();
        let flip = pair_distance(&a, &b, SignMode::Flipped).unwrap();
        let lo = 1.0 / (1.0 + std::f64::consts::E);
        prop_assert!(lit >= lo - 1e-12 && lit <= 1.0 - lo + 1e-12);
        prop_assert!((lit + flip - 1.0).abs() < 1e-15);
        prop_assert_eq!(lit, pair_distance(&b, &a, SignMode::Literal).unwrap());
    }

    #[test]
    fn blend_interpolates(ori in vector(6), ada in vector(6), alpha in 0.0..=1.0f64) {
        prop_assert_eq!(blend(&ori, &ada, 1.0).unwrap(), ori.clone());
        prop_assert_eq!(blend(&ori, &ada, 0.0).unwrap(), ada.clone());
        let mid = blend(&ori, &ada, alpha).unwrap();
        for ((m, o), a) in mid.iter().zip(&ori).zip(&ada) {
            prop_assert!(*m >= o.min(*a) - 1e-12 && *m <= o.max(*a) + 1e-12);
        }
        prop_assert!(blend(&ori, &ada, 1.0 + 1e-9).is_err());
    }

    #[test]
    fn softmax_is_a_shift_invariant_distribution(x in prop::collection::vec(-50.0..50.0f64, 1..10), c in -100.0..100.0f64) {
        let p = softmax(&x);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let (dist, best) = classify(&x).unwrap();
        prop_assert_eq!(dist, p);
        prop_assert!(x.iter().all(|v| *v <= x[best]));
    }

    #[test]
    fn checkpoint_text_round_trips(
        slots in prop::collection::vec((1..4usize, 1..4usize, any::<bool>()), 1..4),
        seed in any::<u64>(),
        mem in prop::collection::vec(prop::collection::vec(-1e3..1e3f64, 2), 0..5),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (i, (r, c, trainable)) in slots.iter().enumerate() {
            // awkward values: subnormals, negative zero, long mantissas
            let data: Vec<f64> = (0..r * c)
                .map(|j| match j % 4 {
                    0 => rng.gen::<f64>() * 1e-310,
                    1 => -0.0,
                    _ => rng.gen_range(-1e6..1e6) / 3.0,
                })
                .collect();
            params.add_matrix(&format!("p{i}"), *r, *c, data, *trainable).unwrap();
        }
        let mut store = MemoryStore::new();
        for (i, v) in mem.iter().enumerate() {
            let set = PrototypeSet {
                episode_id: i as u64,
                labels: vec![BioTag::begin(format!("s{i}"))],
                prototypes: vec![v.clone()],
                counts: vec![1],
            };
            store.insert(&set, &ContrastiveConfig::default()).unwrap();
        }
        let text = checkpoint_text(&params, &store);
        let (p2, m2) = parse_checkpoint(&text).unwrap();
        prop_assert_eq!(&p2, &params);
        prop_assert_eq!(&m2, &store);
        for (a, b) in p2.slots().iter().zip(params.slots()) {
            prop_assert!(a.data.iter().map(|x| x.to_bits()).eq(b.data.iter().map(|x| x.to_bits())));
        }
        prop_assert_eq!(checkpoint_text(&p2, &m2), text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sampled_episodes_meet_their_invariants(seed in any::<u64>(), k in 1..=5usize) {
        let corpus = generate_synthetic(&SyntheticSpec::desk_default()).unwrap();
        for domain in corpus.domain_names() {
            let ep = sample_episode(&corpus, domain, k, 10, seed).unwrap();
            ep.check(k).unwrap();
            prop_assert_eq!(&ep, &sample_episode(&corpus, domain, k, 10, seed).unwrap());
            prop_assert!(ep.support_indices.iter().all(|i| !ep.query_indices.contains(i)));
        }
    }
}
