//! Self-supervised objectives: pairwise subgraph discrimination (PSD) and
//! attribute masking, trained jointly.

use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chem::{Element, FeatureVocab, MolGraph};
use crate::molgnet::{collection_embedding, forward_tape, BatchedGraph, MolGNetConfig, MolGNetParams, Segment};
use crate::numcore::{Adam, AdamConfig, Tape, Tensor, Var};
use crate::params::{
    adam_update, bind_constant, bind_param, collect_grads, param_struct, round_to_f32, visit_prefixed,
    visit_prefixed_mut, ParamTree,
};
use crate::{Error, Result};

/// A fragment plus where it came from: corpus index and first original atom.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fragment {
    pub graph: MolGraph,
    pub source: usize,
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubgraphPair {
    pub left: Fragment,
    pub right: Fragment,
    /// True for a homologous pair.
    pub label: bool,
}

/// Inclusive border range `[ceil(n/3), floor(2n/3)]`.
pub fn border_range(n: usize) -> Result<(usize, usize)> {
    if n < 3 {
        return Err(Error::TooSmall { n });
    }
    Ok((n.div_ceil(3), 2 * n / 3))
}

/// Splits at `border`: left is atoms `[0, border)`, right is `[border, n)`,
/// crossing bonds dropped.
pub fn decompose_at(graph: &MolGraph, border: usize) -> Result<(MolGraph, MolGraph)> {
    let n = graph.n_atoms();
    if border == 0 || border >= n {
        return Err(Error::Structure(format!(
            "border {border} leaves an empty side of {n} atoms"
        )));
    }
    Ok((graph.induced_range(0, border)?, graph.induced_range(border, n)?))
}

/// Draws a border uniformly from [`border_range`] and splits there.
/// Returns `(left, right, border)`.
pub fn decompose<R: Rng + ?Sized>(graph: &MolGraph, rng: &mut R) -> Result<(MolGraph, MolGraph, usize)> {
    let (lo, hi) = border_range(graph.n_atoms())?;
    let b = rng.gen_range(lo..=hi);
    let (l, r) = decompose_at(graph, b)?;
    Ok((l, r, b))
}

/// Which branch of the negative-sampling coin to take.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Sampled,
    Positive,
    Negative,
}

/// Builds a PSD pair from `corpus[index]`. Half of the time the right side is
/// replaced by one side (chosen uniformly) of another decomposable molecule.
pub fn make_psd_sample<R: Rng + ?Sized>(corpus: &[MolGraph], index: usize, rng: &mut R) -> Result<SubgraphPair> {
    make_psd_sample_with(corpus, index, Branch::Sampled, rng)
}

pub fn make_psd_sample_with<R: Rng + ?Sized>(
    corpus: &[MolGraph],
    index: usize,
    branch: Branch,
    rng: &mut R,
) -> Result<SubgraphPair> {
    let graph = corpus
        .get(index)
        .ok_or_else(|| Error::Dataset(format!("no molecule at index {index}")))?;
    let (left, right, border) = decompose(graph, rng)?;
    let negative = match branch {
        Branch::Sampled => rng.gen_bool(0.5),
        Branch::Positive => false,
        Branch::Negative => true,
    };
    let left = Fragment {
        graph: left,
        source: index,
        start: 0,
    };
    if !negative {
        return Ok(SubgraphPair {
            left,
            right: Fragment {
                graph: right,
                source: index,
                start: border,
            },
            label: true,
        });
    }
    let others: Vec<usize> = (0..corpus.len())
        .filter(|&j| j != index && corpus[j].n_atoms() >= 3)
        .collect();
    if others.is_empty() {
        return Err(Error::Degenerate(
            "negative sampling needs a second decomposable molecule".into(),
        ));
    }
    let other = others[rng.gen_range(0..others.len())];
    let (ol, or, ob) = decompose(&corpus[other], rng)?;
    let right = if rng.gen_bool(0.5) {
        Fragment {
            graph: ol,
            source: other,
            start: 0,
        }
    } else {
        Fragment {
            graph: or,
            source: other,
            start: ob,
        }
    };
    Ok(SubgraphPair {
        left,
        right,
        label: false,
    })
}

/// Left fragment in the first segment, right in the second, and one
/// collection node fed by every atom.
pub fn stitch(pair: &SubgraphPair, vocab: &FeatureVocab) -> Result<BatchedGraph> {
    BatchedGraph::from_parts(
        &[(&pair.left.graph, Segment::First), (&pair.right.graph, Segment::Second)],
        vocab,
        true,
    )
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MaskFields {
    /// Node ids in the batch.
    pub positions: Vec<usize>,
    /// Element classes before masking.
    pub targets: Vec<usize>,
}

/// Masks `ceil(rate * atoms)` ordinary atoms per graph (at least one) by
/// overwriting their element index with MASK. Other fields are untouched.
pub fn apply_attr_mask<R: Rng + ?Sized>(
    batch: &mut BatchedGraph,
    rate: f64,
    vocab: &FeatureVocab,
    rng: &mut R,
) -> Result<MaskFields> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Config(format!("mask rate {rate} must lie in (0, 1)")));
    }
    let mask_index = vocab.element_index(Element::Mask)?;
    let offset = vocab.element_index(Element::ALL[0])?;
    let mut fields = MaskFields::default();
    for g in 0..batch.n_graphs() {
        let atoms: Vec<usize> = batch
            .graph_nodes(g)
            .into_iter()
            .filter(|&i| !batch.is_collection(i))
            .collect();
        if atoms.is_empty() {
            continue;
        }
        let k = ((rate * atoms.len() as f64).ceil() as usize).clamp(1, atoms.len());
        let mut chosen: Vec<usize> = sample(rng, atoms.len(), k).into_iter().map(|i| atoms[i]).collect();
        chosen.sort_unstable();
        for node in chosen {
            fields.targets.push(batch.node_features[node][0] - offset);
            batch.node_features[node][0] = mask_index;
            fields.positions.push(node);
        }
    }
    Ok(fields)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainSample {
    pub graph: BatchedGraph,
    pub psd_label: bool,
    pub masked_positions: Vec<usize>,
    pub masked_targets: Vec<usize>,
}

/// Decompose, maybe swap the right side, stitch and mask in one go.
pub fn build_sample<R: Rng + ?Sized>(
    corpus: &[MolGraph],
    index: usize,
    vocab: &FeatureVocab,
    mask_rate: f64,
    rng: &mut R,
) -> Result<PretrainSample> {
    let pair = make_psd_sample(corpus, index, rng)?;
    let mut graph = stitch(&pair, vocab)?;
    let mask = apply_attr_mask(&mut graph, mask_rate, vocab, rng)?;
    Ok(PretrainSample {
        graph,
        psd_label: pair.label,
        masked_positions: mask.positions,
        masked_targets: mask.targets,
    })
}

/// Several samples as one disconnected batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainBatch {
    pub graph: BatchedGraph,
    pub labels: Vec<f64>,
    pub masked_positions: Vec<usize>,
    pub masked_targets: Vec<usize>,
}

pub fn collate(samples: &[PretrainSample]) -> Result<PretrainBatch> {
    if samples.is_empty() {
        return Err(Error::Degenerate("empty pre-training batch".into()));
    }
    let graphs: Vec<BatchedGraph> = samples.iter().map(|s| s.graph.clone()).collect();
    let mut positions = Vec::new();
    let mut offset = 0;
    for s in samples {
        positions.extend(s.masked_positions.iter().map(|p| p + offset));
        offset += s.graph.n_nodes();
    }
    Ok(PretrainBatch {
        graph: BatchedGraph::concat(&graphs),
        labels: samples.iter().map(|s| f64::from(u8::from(s.psd_label))).collect(),
        masked_positions: positions,
        masked_targets: samples.iter().flat_map(|s| s.masked_targets.iter().copied()).collect(),
    })
}

param_struct!(
    /// Two-layer discriminator `d -> d -> 1` with GELU.
    PsdHead {
        w1 => "w1",
        b1 => "b1",
        w2 => "w2",
        b2 => "b2",
    }
);

param_struct!(
    /// Linear map from node state to element-class logits.
    MaskHead {
        w => "w",
        b => "b",
    }
);

impl PsdHead {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        PsdHead {
            w1: Tensor::glorot_uniform(d, d, rng),
            b1: Tensor::zeros(&[d]),
            w2: Tensor::glorot_uniform(1, d, rng),
            b2: Tensor::zeros(&[1]),
        }
    }
}

impl MaskHead {
    pub fn init<R: Rng + ?Sized>(d: usize, classes: usize, rng: &mut R) -> Self {
        MaskHead {
            w: Tensor::glorot_uniform(classes, d, rng),
            b: Tensor::zeros(&[classes]),
        }
    }
}

/// Encoder plus both pre-training heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainParams<T = Tensor> {
    pub encoder: MolGNetParams<T>,
    pub psd: PsdHead<T>,
    pub mask: MaskHead<T>,
}

impl<T> PretrainParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&'static str, &T) -> U) -> PretrainParams<U> {
        PretrainParams {
            encoder: self.encoder.map(&mut f),
            psd: self.psd.map(&mut f),
            mask: self.mask.map(&mut f),
        }
    }
}

impl<T> ParamTree<T> for PretrainParams<T> {
    fn visit(&self, f: &mut dyn FnMut(String, &T)) {
        self.encoder.visit(f);
        visit_prefixed(&self.psd, "psd_head.", f);
        visit_prefixed(&self.mask, "mask_head.", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        self.encoder.visit_mut(f);
        visit_prefixed_mut(&mut self.psd, "psd_head.", f);
        visit_prefixed_mut(&mut self.mask, "mask_head.", f);
    }

    fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = self.encoder.leaves_mut();
        out.extend(self.psd.fields_mut());
        out.extend(self.mask.fields_mut());
        out
    }
}

impl PretrainParams {
    pub fn init<R: Rng + ?Sized>(config: &MolGNetConfig, mask_classes: usize, rng: &mut R) -> Result<Self> {
        let encoder = MolGNetParams::init(config, rng)?;
        let psd = PsdHead::init(config.hidden, rng);
        let mask = MaskHead::init(config.hidden, mask_classes, rng);
        Ok(Self { encoder, psd, mask })
    }

    pub fn from_named(config: &MolGNetConfig, mask_classes: usize, named: &[(String, Tensor)]) -> Result<Self> {
        use crate::params::take_named;
        let d = config.hidden;
        let encoder = MolGNetParams::from_named(config, named)?;
        let psd = PsdHead::layout().try_map(|k, _| {
            let shape = match k {
                "w1" => vec![d, d],
                "w2" => vec![1, d],
                "b1" => vec![d],
                _ => vec![1],
            };
            take_named(named, &format!("psd_head.{k}"), &shape)
        })?;
        let mask = MaskHead::layout().try_map(|k, _| {
            let shape = if k == "w" {
                vec![mask_classes, d]
            } else {
                vec![mask_classes]
            };
            take_named(named, &format!("mask_head.{k}"), &shape)
        })?;
        Ok(Self { encoder, psd, mask })
    }
}

pub fn psd_logits<'t>(collection: Var<'t>, head: &PsdHead<Var<'t>>) -> Result<Var<'t>> {
    let hidden = collection.matmul_nt(head.w1)?.add_row(head.b1)?.gelu();
    Ok(hidden.matmul_nt(head.w2)?.add_row(head.b2)?)
}

/// Mean binary cross-entropy of the discriminator, and per-sample
/// probabilities.
pub fn psd_loss<'t>(collection: Var<'t>, labels: &[f64], head: &PsdHead<Var<'t>>) -> Result<(Var<'t>, Vec<f64>)> {
    let logits = psd_logits(collection, head)?;
    let loss = logits.bce_with_logits(labels, None)?;
    let probs = logits
        .value()
        .data()
        .iter()
        .map(|&z| 1.0 / (1.0 + (-z).exp()))
        .collect();
    Ok((loss, probs))
}

/// Mean categorical cross-entropy over masked rows of `nodes`, and the
/// argmax accuracy.
pub fn mask_loss<'t>(
    nodes: Var<'t>,
    positions: &[usize],
    targets: &[usize],
    head: &MaskHead<Var<'t>>,
) -> Result<(Var<'t>, f64)> {
    if positions.is_empty() {
        return Err(Error::EmptyMask);
    }
    let logits = nodes.gather_rows(positions)?.matmul_nt(head.w)?.add_row(head.b)?;
    let loss = logits.softmax_cross_entropy(targets)?;
    let acc = argmax_accuracy(&logits.value(), targets);
    Ok((loss, acc))
}

fn argmax_accuracy(logits: &Tensor, targets: &[usize]) -> f64 {
    let hits = (0..logits.rows())
        .filter(|&r| {
            let row = logits.row(r);
            let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best == targets[r]
        })
        .count();
    hits as f64 / targets.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub psd_loss: f64,
    pub mask_loss: f64,
    pub total_loss: f64,
    pub psd_acc: f64,
    pub mask_acc: f64,
}

fn psd_accuracy(probs: &[f64], labels: &[f64]) -> f64 {
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(p, y)| (**p >= 0.5) == (**y >= 0.5))
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Builds the joint loss `psd + lambda * mask` on `tape`.
pub fn joint_loss<'t>(
    batch: &PretrainBatch,
    vars: &PretrainParams<Var<'t>>,
    config: &MolGNetConfig,
    lambda: f64,
) -> Result<(Var<'t>, StepMetrics)> {
    let out = forward_tape(&batch.graph, &vars.encoder, config)?;
    let coll = collection_embedding(&batch.graph, out.nodes)?;
    let (psd, probs) = psd_loss(coll, &batch.labels, &vars.psd)?;
    let (mask, mask_acc) = mask_loss(out.nodes, &batch.masked_positions, &batch.masked_targets, &vars.mask)?;
    let total = psd.add(mask.scale(lambda))?;
    let metrics = StepMetrics {
        psd_loss: psd.value().item(),
        mask_loss: mask.value().item(),
        total_loss: total.value().item(),
        psd_acc: psd_accuracy(&probs, &batch.labels),
        mask_acc,
    };
    Ok((total, metrics))
}

/// Gradients of the joint loss in [`ParamTree`] order, without updating.
pub fn joint_gradients(
    batch: &PretrainBatch,
    params: &PretrainParams,
    config: &MolGNetConfig,
    lambda: f64,
) -> Result<(Vec<Tensor>, StepMetrics)> {
    let tape = Tape::new();
    let vars = params.map(bind_param(&tape));
    let (total, metrics) = joint_loss(batch, &vars, config, lambda)?;
    tape.backward(total)?;
    Ok((collect_grads(&vars), metrics))
}

/// One optimizer step on the joint objective. Metrics are measured before
/// the update.
pub fn joint_pretrain_step(
    batch: &PretrainBatch,
    params: &mut PretrainParams,
    adam: &mut Adam,
    config: &MolGNetConfig,
    lambda: f64,
) -> Result<StepMetrics> {
    let (grads, metrics) = joint_gradients(batch, params, config, lambda)?;
    adam_update(adam, params, &grads)?;
    Ok(metrics)
}

/// Metrics without a gradient pass.
pub fn evaluate_batch(
    batch: &PretrainBatch,
    params: &PretrainParams,
    config: &MolGNetConfig,
    lambda: f64,
) -> Result<StepMetrics> {
    let tape = Tape::new();
    let vars = params.map(bind_constant(&tape));
    Ok(joint_loss(batch, &vars, config, lambda)?.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub mask_rate: f64,
    pub lambda: f64,
    pub held_out_fraction: f64,
    pub eval_samples: usize,
    pub optimizer: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 32,
            mask_rate: 0.15,
            lambda: 1.0,
            held_out_fraction: 0.1,
            eval_samples: 200,
            optimizer: AdamConfig::default(),
        }
    }
}

/// One line of the pre-training metrics stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub psd_loss: f64,
    pub mask_loss: f64,
    pub psd_acc: f64,
    pub mask_acc: f64,
}

impl MetricsRecord {
    pub fn new(step: usize, m: &StepMetrics) -> Self {
        Self {
            step,
            psd_loss: m.psd_loss,
            mask_loss: m.mask_loss,
            psd_acc: m.psd_acc,
            mask_acc: m.mask_acc,
        }
    }

    pub fn write_line(&self, out: &mut impl Write) -> std::io::Result<()> {
        let line = serde_json::to_string(self).map_err(std::io::Error::other)?;
        writeln!(out, "{line}")
    }
}

/// Seeded training loop over a molecule corpus with a held-out split.
/// Negatives for training samples come from training molecules only.
pub struct Pretrainer {
    pub model: MolGNetConfig,
    pub config: PretrainConfig,
    pub vocab: FeatureVocab,
    pub params: PretrainParams,
    pub adam: Adam,
    /// Round parameters to 32-bit floats after init and every update.
    pub f32_params: bool,
    pub step: usize,
    train: Vec<MolGraph>,
    held_out: Vec<MolGraph>,
    rng: ChaCha8Rng,
}

impl Pretrainer {
    pub fn new(corpus: Vec<MolGraph>, model: MolGNetConfig, config: PretrainConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = FeatureVocab::default();
        let params = PretrainParams::init(&model, vocab.element_cardinality(), &mut rng)?;
        Self::with_params(corpus, model, config, params, rng)
    }

    /// Starts from given parameters; `rng` drives the split and sampling.
    pub fn with_params(
        corpus: Vec<MolGraph>,
        model: MolGNetConfig,
        config: PretrainConfig,
        params: PretrainParams,
        mut rng: ChaCha8Rng,
    ) -> Result<Self> {
        let usable: Vec<MolGraph> = corpus.into_iter().filter(|g| g.n_atoms() >= 3).collect();
        let n_hold = ((usable.len() as f64) * config.held_out_fraction).round() as usize;
        if usable.len() < n_hold + 2 || (n_hold > 0 && n_hold < 2) {
            return Err(Error::Dataset(format!(
                "{} decomposable molecules is too few for the split",
                usable.len()
            )));
        }
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let order = sample(&mut rng, usable.len(), usable.len()).into_vec();
        let mut held_out = Vec::new();
        let mut train = Vec::new();
        for (rank, &i) in order.iter().enumerate() {
            if rank < n_hold {
                held_out.push(usable[i].clone());
            } else {
                train.push(usable[i].clone());
            }
        }
        Ok(Self {
            adam: Adam::new(config.optimizer),
            model,
            config,
            vocab: FeatureVocab::default(),
            params,
            f32_params: false,
            step: 0,
            train,
            held_out,
            rng,
        })
    }

    pub fn train_molecules(&self) -> &[MolGraph] {
        &self.train
    }

    pub fn held_out_molecules(&self) -> &[MolGraph] {
        &self.held_out
    }

    pub fn set_f32_params(&mut self, on: bool) {
        self.f32_params = on;
        if on {
            round_to_f32(&mut self.params);
        }
    }

    pub fn next_batch(&mut self) -> Result<PretrainBatch> {
        let samples = (0..self.config.batch_size)
            .map(|_| {
                let i = self.rng.gen_range(0..self.train.len());
                build_sample(&self.train, i, &self.vocab, self.config.mask_rate, &mut self.rng)
            })
            .collect::<Result<Vec<_>>>()?;
        collate(&samples)
    }

    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let batch = self.next_batch()?;
        let m = joint_pretrain_step(
            &batch,
            &mut self.params,
            &mut self.adam,
            &self.model,
            self.config.lambda,
        )?;
        if self.f32_params {
            round_to_f32(&mut self.params);
        }
        self.step += 1;
        Ok(m)
    }

    /// Fixed held-out samples drawn with their own seed, negatives taken from
    /// held-out molecules.
    pub fn held_out_samples(&self, seed: u64) -> Result<Vec<PretrainSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if self.held_out.is_empty() {
            return Err(Error::Dataset("no held-out molecules".into()));
        }
        (0..self.config.eval_samples)
            .map(|k| {
                let i = k % self.held_out.len();
                build_sample(&self.held_out, i, &self.vocab, self.config.mask_rate, &mut rng)
            })
            .collect()
    }

    /// Accuracy and loss on `samples`, pooled over chunks of the batch size.
    pub fn evaluate(&self, samples: &[PretrainSample]) -> Result<StepMetrics> {
        let mut acc = StepMetrics {
            psd_loss: 0.0,
            mask_loss: 0.0,
            total_loss: 0.0,
            psd_acc: 0.0,
            mask_acc: 0.0,
        };
        let (mut n_psd, mut n_mask) = (0.0, 0.0);
        for chunk in samples.chunks(self.config.batch_size.max(1)) {
            let batch = collate(chunk)?;
            let m = evaluate_batch(&batch, &self.params, &self.model, self.config.lambda)?;
            let (w, wm) = (batch.labels.len() as f64, batch.masked_targets.len() as f64);
            acc.psd_loss += m.psd_loss * w;
            acc.psd_acc += m.psd_acc * w;
            acc.mask_loss += m.mask_loss * wm;
            acc.mask_acc += m.mask_acc * wm;
            n_psd += w;
            n_mask += wm;
        }
        acc.psd_loss /= n_psd;
        acc.psd_acc /= n_psd;
        acc.mask_loss /= n_mask;
        acc.mask_acc /= n_mask;
        acc.total_loss = acc.psd_loss + self.config.lambda * acc.mask_loss;
        Ok(acc)
    }
}
