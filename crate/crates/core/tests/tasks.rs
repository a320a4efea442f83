use mpg_core::chem::{parse_smiles, FeatureVocab, MolGraph};
use mpg_core::molgnet::{ArcKind, BatchedGraph, MolGNetConfig, MolGNetParams, Readout, Segment};
use mpg_core::numcore::AdamConfig;
use mpg_core::ssl::{stitch, Fragment, SubgraphPair};
use mpg_core::synthetic::{toy_corpus, Family};
use mpg_core::tasks::{
    assemble_pair, assemble_single, auc_roc, davies_bouldin, default_split, embed_molecules, f1, finetune, prc_auc,
    predict, random_split, rmse, validity_separation_experiment, FinetuneConfig, FinetuneParams, LabeledDataset,
    TaskKind,
};
use mpg_core::Error;
use mpg_testkit::pairwise_auc;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mol(s: &str) -> MolGraph {
    parse_smiles(s, true).unwrap()
}

fn small() -> MolGNetConfig {
    MolGNetConfig::with_dims(2, 1, 16, 2)
}

fn encoder(config: &MolGNetConfig, seed: u64) -> MolGNetParams {
    MolGNetParams::init(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn virtual_arcs(g: &BatchedGraph) -> usize {
    g.arcs.iter().filter(|a| a.kind == ArcKind::Virtual).count()
}

fn family_dataset(n: usize, seed: u64) -> LabeledDataset {
    let records = toy_corpus(n, seed)
        .into_iter()
        .map(|m| {
            (
                m.smiles,
                None,
                vec![Some(f64::from(u8::from(m.family == Family::Ring)))],
            )
        })
        .collect();
    LabeledDataset::from_records(vec!["ring".into()], records, None).unwrap()
}

#[test]
fn single_assembly_counts() {
    let g = assemble_single(&mol("CCOCN"), &FeatureVocab::default()).unwrap();
    assert_eq!(g.n_nodes(), 6);
    assert_eq!(virtual_arcs(&g), 5);
    assert_eq!(g.arcs.len(), 5 + 2 * 4);
    assert!(g.node_segment[..5].iter().all(|&s| s == Segment::First));
    g.validate().unwrap();
}

#[test]
fn single_assembly_is_a_one_sided_stitch() {
    let vocab = FeatureVocab::default();
    let m = mol("CC(=O)N");
    let alone = BatchedGraph::from_parts(&[(&m, Segment::First)], &vocab, true).unwrap();
    assert_eq!(assemble_single(&m, &vocab).unwrap(), alone);
    assert!(!alone.node_segment.contains(&Segment::Second));
}

#[test]
fn collection_embedding_ignores_atom_order() {
    let config = small();
    let p = encoder(&config, 1);
    let rows = embed_molecules(&[mol("OCC(N)C"), mol("CC(N)CO")], &p, &config, Readout::Collection).unwrap();
    for (a, b) in rows[0].iter().zip(&rows[1]) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn pair_assembly_counts_and_swap() {
    let vocab = FeatureVocab::default();
    let (a, b) = (mol("CCO"), mol("CCCN"));
    let ab = assemble_pair(&a, &b, &vocab).unwrap();
    assert_eq!(ab.n_nodes(), 8);
    assert_eq!(virtual_arcs(&ab), 7);
    let ba = assemble_pair(&b, &a, &vocab).unwrap();
    // Same node multiset and arcs up to segment ids.
    let strip = |g: &BatchedGraph| {
        let mut nodes: Vec<Vec<usize>> = g.node_features.clone();
        nodes.sort();
        let mut bonds: Vec<Vec<usize>> = g
            .arcs
            .iter()
            .filter_map(|a| match &a.kind {
                ArcKind::Bond { features, .. } => Some(features.clone()),
                ArcKind::Virtual => None,
            })
            .collect();
        bonds.sort();
        (nodes, bonds)
    };
    assert_eq!(strip(&ab), strip(&ba));
    let seg = |g: &BatchedGraph, s| g.node_segment.iter().filter(|&&x| x == s).count();
    assert_eq!((seg(&ab, Segment::First), seg(&ab, Segment::Second)), (3, 4));
    assert_eq!((seg(&ba, Segment::First), seg(&ba, Segment::Second)), (4, 3));
}

#[test]
fn pair_assembly_matches_the_stitch_contract() {
    let vocab = FeatureVocab::default();
    let (a, b) = (mol("c1ccccc1O"), mol("CC(=O)N"));
    let pair = SubgraphPair {
        left: Fragment {
            graph: a.clone(),
            source: 0,
            start: 0,
        },
        right: Fragment {
            graph: b.clone(),
            source: 1,
            start: 0,
        },
        label: false,
    };
    let assembled = assemble_pair(&a, &b, &vocab).unwrap();
    let stitched = stitch(&pair, &vocab).unwrap();
    assembled.validate().unwrap();
    stitched.validate().unwrap();
    assert_eq!(assembled, stitched);
}

fn pair_dataset(pairs: &[(&str, &str)]) -> LabeledDataset {
    let records = pairs
        .iter()
        .enumerate()
        .map(|(i, (a, b))| (a.to_string(), Some(b.to_string()), vec![Some((i % 2) as f64)]));
    LabeledDataset::from_records(vec!["y".into()], records.collect(), None).unwrap()
}

#[test]
fn head_output_depends_on_pair_order() {
    let config = small();
    let mut p = FinetuneParams::with_fresh_head(encoder(&config, 2), &config, 1, 3);
    let vocab = FeatureVocab::default();
    let forward = pair_dataset(&[("CCO", "c1ccccc1")]);
    let reverse = pair_dataset(&[("c1ccccc1", "CCO")]);
    let score = |p: &FinetuneParams, d: &LabeledDataset| {
        predict(
            &d.rows.iter().collect::<Vec<_>>(),
            p,
            &config,
            TaskKind::Binary,
            Readout::Collection,
            &vocab,
        )
        .unwrap()[0][0]
    };
    assert_ne!(score(&p, &forward), score(&p, &reverse));
    // With equal segment rows the swap is invisible up to summation order.
    let seg = &mut p.encoder.embed.segment;
    let first = seg.row(Segment::First.index()).to_vec();
    seg.row_mut(Segment::Second.index()).copy_from_slice(&first);
    assert!((score(&p, &forward) - score(&p, &reverse)).abs() < 1e-12);
}

#[test]
fn pair_datasets_use_the_pair_split() {
    let d = pair_dataset(&[("C", "N"); 50]);
    assert!(d.is_pair());
    let s = default_split(&d, 0);
    assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (35, 5, 10));
    let single = family_dataset(50, 0);
    let s = default_split(&single, 0);
    assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (40, 5, 5));
}

#[test]
fn constant_regression_fits_to_zero_error() {
    let records = toy_corpus(40, 4)
        .into_iter()
        .map(|m| (m.smiles, None, vec![Some(2.5)]))
        .collect();
    let d = LabeledDataset::from_records(vec!["y".into()], records, None).unwrap();
    assert_eq!(d.kind, TaskKind::Regression);
    let config = small();
    let cfg = FinetuneConfig {
        max_epochs: 60,
        batch_size: 8,
        patience: 60,
        optimizer: AdamConfig {
            lr: 3e-2,
            ..AdamConfig::default()
        },
        ..FinetuneConfig::default()
    };
    let split = random_split(d.rows.len(), [8.0, 1.0, 1.0], 4);
    let r = finetune(&d, &split, encoder(&config, 4), &config, &cfg, 4).unwrap();
    let first = r.history[0].valid_metric;
    let err = r.test.rmse.unwrap();
    assert!(err < 0.05 && err < first / 20.0, "rmse {err}, first epoch {first}");
}

#[test]
fn training_loss_decreases_on_a_toy_task() {
    let d = family_dataset(100, 5);
    let config = small();
    let cfg = FinetuneConfig {
        max_epochs: 8,
        patience: 8,
        optimizer: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        ..FinetuneConfig::default()
    };
    let r = finetune(&d, &default_split(&d, 5), encoder(&config, 5), &config, &cfg, 5).unwrap();
    let losses: Vec<f64> = r.history.iter().map(|e| e.train_loss).collect();
    assert!(losses.last().unwrap() < &(losses[0] * 0.8), "{losses:?}");
    let auc = r.test.auc_roc.unwrap();
    assert!((0.0..=1.0).contains(&auc));
}

#[test]
fn training_stops_once_the_target_is_reached() {
    let d = family_dataset(30, 6);
    let config = small();
    let cfg = FinetuneConfig {
        max_epochs: 5,
        patience: 5,
        stop_at: Some(0.0),
        ..FinetuneConfig::default()
    };
    let r = finetune(&d, &default_split(&d, 6), encoder(&config, 6), &config, &cfg, 6).unwrap();
    assert_eq!((r.history.len(), r.best_epoch), (1, 1));
}

#[test]
fn multilabel_missing_cells_are_skipped() {
    let text = "smiles,a,b\nCCO,1,\nCCN,0,1\nc1ccccc1,1,1\nCC,0,\n";
    let d = LabeledDataset::read_csv(text, None).unwrap();
    assert_eq!(d.kind, TaskKind::Multilabel);
    let config = small();
    let p = FinetuneParams::with_fresh_head(encoder(&config, 6), &config, 2, 6);
    let rows: Vec<_> = d.rows.iter().collect();
    let scores = predict(
        &rows,
        &p,
        &config,
        d.kind,
        Readout::Collection,
        &FeatureVocab::default(),
    )
    .unwrap();
    assert!(scores.iter().flatten().all(|s| (0.0..=1.0).contains(s)));
    let r = mpg_core::tasks::evaluate(
        &rows,
        &p,
        &config,
        d.kind,
        Readout::Collection,
        &FeatureVocab::default(),
    )
    .unwrap();
    // Label b has no negatives, so only label a is scored.
    let a_scores: Vec<f64> = scores.iter().map(|s| s[0]).collect();
    assert_eq!(
        r.auc_roc,
        Some(auc_roc(&a_scores, &[true, false, true, false]).unwrap())
    );
}

#[test]
fn metric_fixtures() {
    assert_eq!(
        auc_roc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(),
        0.75
    );
    assert_eq!(auc_roc(&[0.2, 0.9], &[false, true]).unwrap(), 1.0);
    assert_eq!(
        auc_roc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(),
        0.5
    );
    assert!(matches!(
        auc_roc(&[0.1, 0.2], &[false, false]),
        Err(Error::Degenerate(_))
    ));
    assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - (25.0f64 / 2.0).sqrt()).abs() < 1e-9);
    assert_eq!(rmse(&[0.5, 0.25], &[0.5, 0.25]).unwrap(), 0.0);
    assert_eq!(f1(&[1.0, 0.0, 0.7], &[true, false, true]).unwrap(), 1.0);
    assert_eq!(
        prc_auc(&[0.95, 0.3, 0.2, 0.1], &[true, false, false, false]).unwrap(),
        1.0
    );
    assert!((f1(&[0.9, 0.6, 0.4, 0.1], &[true, false, true, false]).unwrap() - 0.5).abs() < 1e-9);
    let ap = prc_auc(&[0.9, 0.6, 0.4, 0.1], &[false, true, true, false]).unwrap();
    assert!((ap - (0.5 * 0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-9);
    let pts: Vec<Vec<f64>> = [-1.5, -0.5, 0.5, 1.5].iter().map(|&x| vec![x]).collect();
    assert!((davies_bouldin(&pts, &[0, 0, 1, 1]).unwrap() - 0.5).abs() < 1e-9);
    let tight = vec![
        vec![0.0, 0.0],
        vec![1e-8, 0.0],
        vec![50.0, 50.0],
        vec![50.0, 50.0 + 1e-8],
    ];
    assert!(davies_bouldin(&tight, &[0, 0, 1, 1]).unwrap() < 1e-9);
    assert!(matches!(
        davies_bouldin(&[vec![2.0], vec![2.0]], &[0, 1]),
        Err(Error::Degenerate(_))
    ));
}

#[test]
fn separation_experiment_is_deterministic() {
    let corpus: Vec<MolGraph> = toy_corpus(100, 8).iter().map(|m| mol(&m.smiles)).collect();
    let config = small();
    let p = encoder(&config, 8);
    let (a, b) = validity_separation_experiment(&corpus, &p, &p, &config, 8).unwrap();
    assert_eq!(a, b);
    assert!(a >= 0.0);
    let again = validity_separation_experiment(&corpus, &p, &p, &config, 8).unwrap();
    assert_eq!(again, (a, b));
    assert!(validity_separation_experiment(&corpus[..99], &p, &p, &config, 8).is_err());
}

fn dataset(seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=50);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
    labels[0] = true;
    labels[1] = false;
    // Coarse scores so that ties occur.
    let scores = (0..n).map(|_| f64::from(rng.gen_range(0..8u8)) / 8.0).collect();
    (scores, labels)
}

proptest! {
    #[test]
    fn auc_matches_pair_counting(seed in any::<u64>()) {
        let (s, l) = dataset(seed);
        prop_assert_eq!(auc_roc(&s, &l).unwrap(), pairwise_auc(&s, &l));
    }

    #[test]
    fn auc_ignores_monotone_transforms(seed in any::<u64>(), scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let (s, l) = dataset(seed);
        let t: Vec<f64> = s.iter().map(|x| (scale * x + shift).exp()).collect();
        prop_assert_eq!(auc_roc(&s, &l).unwrap(), auc_roc(&t, &l).unwrap());
    }

    #[test]
    fn metrics_stay_in_range(seed in any::<u64>()) {
        let (s, l) = dataset(seed);
        for v in [auc_roc(&s, &l).unwrap(), prc_auc(&s, &l).unwrap(), f1(&s, &l).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let y: Vec<f64> = l.iter().map(|&b| f64::from(u8::from(b))).collect();
        prop_assert!(rmse(&s, &y).unwrap() >= 0.0);
        let pts: Vec<Vec<f64>> = s.iter().zip(&y).map(|(a, b)| vec![*a, *b]).collect();
        let clusters: Vec<usize> = l.iter().map(|&b| usize::from(b)).collect();
        prop_assert!(davies_bouldin(&pts, &clusters).unwrap() >= 0.0);
    }

    #[test]
    fn splits_are_disjoint_and_exhaustive(n in 0usize..300, seed in any::<u64>()) {
        let s = random_split(n, [8.0, 1.0, 1.0], seed);
        let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
}
