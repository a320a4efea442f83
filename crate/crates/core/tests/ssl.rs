use mpg_core::chem::{parse_smiles, FeatureVocab, MolGraph};
use mpg_core::molgnet::{collection_embedding, forward, forward_tape, ArcKind, MolGNetConfig, Segment};
use mpg_core::numcore::gradcheck::check_params;
use mpg_core::numcore::{Adam, AdamConfig, Tape};
use mpg_core::params::{bind_param, collect_grads, named_tensors};
use mpg_core::ssl::{
    apply_attr_mask, build_sample, collate, decompose, decompose_at, joint_gradients, joint_loss, joint_pretrain_step,
    make_psd_sample, make_psd_sample_with, psd_loss, stitch, Branch, Fragment, PretrainParams, SubgraphPair,
};
use mpg_core::synthetic::toy_corpus;
use mpg_testkit::random_graph;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mol(s: &str) -> MolGraph {
    parse_smiles(s, true).unwrap()
}

fn toy(n: usize, seed: u64) -> Vec<MolGraph> {
    toy_corpus(n, seed).iter().map(|m| mol(&m.smiles)).collect()
}

fn small_model() -> MolGNetConfig {
    MolGNetConfig::with_dims(2, 2, 16, 2)
}

fn fresh(config: &MolGNetConfig, seed: u64) -> PretrainParams {
    PretrainParams::init(
        config,
        FeatureVocab::default().element_cardinality(),
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap()
}

fn pair(left: MolGraph, right: MolGraph, same: bool) -> SubgraphPair {
    SubgraphPair {
        left: Fragment {
            graph: left,
            source: 0,
            start: 0,
        },
        right: Fragment {
            graph: right,
            source: usize::from(!same),
            start: 0,
        },
        label: same,
    }
}

#[test]
fn border_support_on_nine_atoms() {
    let g = mol("CCCCCCCCC");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut hits = [0usize; 10];
    for _ in 0..1000 {
        let (l, r, b) = decompose(&g, &mut rng).unwrap();
        assert_eq!((l.n_atoms(), r.n_atoms()), (b, 9 - b));
        hits[b] += 1;
    }
    assert!((3..=6).all(|b| hits[b] > 0));
    assert_eq!(hits.iter().sum::<usize>(), hits[3..=6].iter().sum::<usize>());
}

#[test]
fn negative_rate_is_one_half() {
    let corpus = toy(50, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 10_000;
    let negatives = (0..n)
        .filter(|i| !make_psd_sample(&corpus, i % corpus.len(), &mut rng).unwrap().label)
        .count();
    let rate = negatives as f64 / n as f64;
    assert!((0.48..=0.52).contains(&rate), "{rate}");
}

#[test]
fn fragments_keep_their_atom_and_bond_records() {
    let corpus = toy(20, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..corpus.len() {
        for branch in [Branch::Positive, Branch::Negative] {
            let p = make_psd_sample_with(&corpus, i, branch, &mut rng).unwrap();
            for frag in [&p.left, &p.right] {
                let src = &corpus[frag.source];
                let n = frag.graph.n_atoms();
                assert_eq!(frag.graph.atoms[..], src.atoms[frag.start..frag.start + n]);
                for b in &frag.graph.bonds {
                    let orig = src
                        .bonds
                        .iter()
                        .find(|o| (o.a, o.b) == (b.a + frag.start, b.b + frag.start))
                        .expect("fragment bond exists in the source");
                    assert_eq!((orig.order, orig.in_ring), (b.order, b.in_ring));
                }
            }
            let vocab = FeatureVocab::default();
            let g = stitch(&p, &vocab).unwrap();
            let left = mpg_core::chem::featurize(&p.left.graph, &vocab).unwrap();
            let right = mpg_core::chem::featurize(&p.right.graph, &vocab).unwrap();
            let expected: Vec<Vec<usize>> = left.atoms.into_iter().chain(right.atoms).collect();
            assert_eq!(g.node_features[..expected.len()], expected[..]);
        }
    }
}

#[test]
fn stitched_fragments_share_no_arcs() {
    let (l, r) = decompose_at(&mol("CCOCCNCC"), 3).unwrap();
    let g = stitch(&pair(l, r, true), &FeatureVocab::default()).unwrap();
    assert_eq!(g.n_nodes(), 9);
    assert_eq!(g.arcs.iter().filter(|a| a.kind == ArcKind::Virtual).count(), 8);
    for a in &g.arcs {
        let (s, t) = (g.node_segment[a.source], g.node_segment[a.target]);
        assert!(!(s == Segment::First && t == Segment::Second) && !(s == Segment::Second && t == Segment::First));
    }
}

#[test]
fn first_segment_ignores_second_segment_contents() {
    let cfg = small_model();
    let p = fresh(&cfg, 4);
    let vocab = FeatureVocab::default();
    let left = mol("CC(=O)N");
    let a = stitch(&pair(left.clone(), mol("c1ccccc1"), false), &vocab).unwrap();
    let b = stitch(&pair(left.clone(), mol("CSCCl"), false), &vocab).unwrap();
    let fa = forward(&a, &p.encoder, &cfg).unwrap().nodes;
    let fb = forward(&b, &p.encoder, &cfg).unwrap().nodes;
    for i in 0..left.n_atoms() {
        assert_eq!(fa.row(i), fb.row(i));
    }
    let last = |t: &mpg_core::numcore::Tensor| t.row(t.rows() - 1).to_vec();
    assert_ne!(last(&fa), last(&fb));
}

#[test]
fn swapping_segments_changes_the_collection_embedding() {
    let cfg = small_model();
    let mut p = fresh(&cfg, 5);
    let vocab = FeatureVocab::default();
    let half = mol("CCO");
    let ab = stitch(&pair(half.clone(), mol("CCN"), false), &vocab).unwrap();
    let ba = stitch(&pair(mol("CCN"), half, false), &vocab).unwrap();
    let coll = |p: &PretrainParams, g| {
        let t = forward(g, &p.encoder, &cfg).unwrap().nodes;
        t.row(t.rows() - 1).to_vec()
    };
    assert_ne!(coll(&p, &ab), coll(&p, &ba));
    let first = p.encoder.embed.segment.row(0).to_vec();
    p.encoder.embed.segment.row_mut(1).copy_from_slice(&first);
    let (x, y) = (coll(&p, &ab), coll(&p, &ba));
    assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn masking_counts_and_exclusions() {
    let vocab = FeatureVocab::default();
    let (l, r) = decompose_at(&mol("CCCCCCCCCC"), 4).unwrap();
    let base = stitch(&pair(l, r, true), &vocab).unwrap();
    let mask_index = vocab.element_index(mpg_core::chem::Element::Mask).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let mut g = base.clone();
        let m = apply_attr_mask(&mut g, 0.15, &vocab, &mut rng).unwrap();
        assert_eq!(m.positions.len(), 2);
        for i in 0..g.n_nodes() {
            if m.positions.contains(&i) {
                assert!(!g.is_collection(i));
                assert_eq!(g.node_features[i][0], mask_index);
                assert_eq!(g.node_features[i][1..], base.node_features[i][1..]);
            } else {
                assert_eq!(g.node_features[i], base.node_features[i]);
            }
        }
    }
}

fn fixed_batch(corpus: &[MolGraph], seed: u64, n: usize) -> mpg_core::ssl::PretrainBatch {
    let vocab = FeatureVocab::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<_> = (0..n)
        .map(|i| build_sample(corpus, i % corpus.len(), &vocab, 0.15, &mut rng).unwrap())
        .collect();
    collate(&samples).unwrap()
}

#[test]
fn joint_loss_gradients_match_finite_differences() {
    let cfg = MolGNetConfig::with_dims(1, 2, 8, 2);
    let params = fresh(&cfg, 7);
    let batch = fixed_batch(&toy(10, 7), 7, 3);
    let named = named_tensors(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let reports = check_params(
        |_, vars| {
            let mut it = vars.iter().copied();
            let q = params.map(|_, _| it.next().unwrap());
            Ok::<_, mpg_core::Error>(joint_loss(&batch, &q, &cfg, 0.7)?.0)
        },
        &named,
        1e-5,
        1e-4,
        Some(5),
        &mut rng,
    )
    .unwrap();
    for r in &reports {
        assert!(r.passed, "{} rel err {}", r.name, r.max_rel_err);
    }
}

#[test]
fn zero_lambda_gives_the_psd_gradient() {
    let cfg = small_model();
    let params = fresh(&cfg, 8);
    let batch = fixed_batch(&toy(10, 8), 8, 4);
    let (joint, _) = joint_gradients(&batch, &params, &cfg, 0.0).unwrap();
    let tape = Tape::new();
    let vars = params.map(bind_param(&tape));
    let out = forward_tape(&batch.graph, &vars.encoder, &cfg).unwrap();
    let coll = collection_embedding(&batch.graph, out.nodes).unwrap();
    let (loss, _) = psd_loss(coll, &batch.labels, &vars.psd).unwrap();
    tape.backward(loss).unwrap();
    let psd_only = collect_grads(&vars);
    for (a, b) in joint.iter().zip(&psd_only) {
        assert!(a.max_abs_diff(b) < 1e-12);
    }
    // The mask head receives nothing.
    let n = joint.len();
    assert!(joint[n - 2..].iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn fixed_batch_loss_decreases_over_fifty_steps() {
    let cfg = small_model();
    let mut params = fresh(&cfg, 9);
    let batch = fixed_batch(&toy(200, 9), 9, 16);
    let mut adam = Adam::new(AdamConfig::default());
    let losses: Vec<f64> = (0..50)
        .map(|_| {
            joint_pretrain_step(&batch, &mut params, &mut adam, &cfg, 1.0)
                .unwrap()
                .total_loss
        })
        .collect();
    let (_, last) = joint_loss(&batch, &params.map(bind_param(&Tape::new())), &cfg, 1.0).unwrap();
    assert!(
        last.total_loss < losses[0] * 0.5,
        "{} -> {}",
        losses[0],
        last.total_loss
    );
    for w in losses.windows(10).step_by(10) {
        assert!(w[9] < w[0], "{losses:?}");
    }
}

proptest! {
    #[test]
    fn decomposition_sizes_stay_in_range(n in 3usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, n, 3);
        let (l, r, b) = decompose(&g, &mut rng).unwrap();
        prop_assert!(b >= n.div_ceil(3) && b <= 2 * n / 3);
        prop_assert_eq!(l.n_atoms() + r.n_atoms(), n);
        let crossing = g.bonds.iter().filter(|x| (x.a < b) != (x.b < b)).count();
        prop_assert_eq!(l.n_bonds() + r.n_bonds() + crossing, g.n_bonds());
    }

    #[test]
    fn every_collection_arc_comes_from_an_ordinary_node(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (na, nb) = (rng.gen_range(1..8), rng.gen_range(1..8));
        let a = random_graph(&mut rng, na, 2);
        let b = random_graph(&mut rng, nb, 2);
        let g = stitch(&pair(a, b, false), &FeatureVocab::default()).unwrap();
        let coll = na + nb;
        let virt: Vec<_> = g.arcs.iter().filter(|x| x.kind == ArcKind::Virtual).collect();
        prop_assert_eq!(virt.len(), na + nb);
        prop_assert!(virt.iter().all(|x| x.target == coll && x.source < coll));
        prop_assert!(g.arcs.iter().all(|x| x.source != coll));
    }
}
