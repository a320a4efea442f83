//! Fine-tuning: labeled datasets, single and pair input assembly, a linear
//! task head, training with early stopping, metrics, and the validity
//! separation analysis.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chem::{parse_smiles, shuffle_atom_features, FeatureVocab, MolGraph};
use crate::molgnet::{forward_tape, readout, BatchedGraph, MolGNetConfig, MolGNetParams, Readout, Segment};
use crate::numcore::{Adam, AdamConfig, Tape, Tensor, Var};
use crate::params::{adam_update, bind_constant, bind_param, collect_grads, param_struct, visit_prefixed, ParamTree};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Binary,
    Multilabel,
    Regression,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub smiles: String,
    pub smiles_2: Option<String>,
    pub graph: MolGraph,
    pub graph_2: Option<MolGraph>,
    /// `None` marks a missing label.
    pub labels: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub kind: TaskKind,
    pub label_names: Vec<String>,
    pub rows: Vec<Row>,
}

impl LabeledDataset {
    pub fn is_pair(&self) -> bool {
        self.rows.first().is_some_and(|r| r.graph_2.is_some())
    }

    pub fn arity(&self) -> usize {
        self.label_names.len()
    }

    /// Builds rows from SMILES and labels, inferring the task kind when
    /// `kind` is `None`: all labels in {0, 1} means classification.
    pub fn from_records(
        label_names: Vec<String>,
        records: Vec<(String, Option<String>, Vec<Option<f64>>)>,
        kind: Option<TaskKind>,
    ) -> Result<Self> {
        if label_names.is_empty() {
            return Err(Error::Dataset("no label columns".into()));
        }
        let mut rows = Vec::with_capacity(records.len());
        for (line, (smiles, smiles_2, labels)) in records.into_iter().enumerate() {
            if labels.len() != label_names.len() {
                return Err(Error::Dataset(format!(
                    "row {line}: {} labels, expected {}",
                    labels.len(),
                    label_names.len()
                )));
            }
            let graph = parse_smiles(&smiles, true).map_err(|e| Error::Dataset(format!("row {line}: {e}")))?;
            let graph_2 = match &smiles_2 {
                Some(s) => Some(parse_smiles(s, true).map_err(|e| Error::Dataset(format!("row {line}: {e}")))?),
                None => None,
            };
            rows.push(Row {
                smiles,
                smiles_2,
                graph,
                graph_2,
                labels,
            });
        }
        if rows.is_empty() {
            return Err(Error::Dataset("dataset has no rows".into()));
        }
        if rows.iter().any(|r| r.graph_2.is_some() != rows[0].graph_2.is_some()) {
            return Err(Error::Dataset("pair rows mixed with single rows".into()));
        }
        let binary = rows
            .iter()
            .flat_map(|r| r.labels.iter().flatten())
            .all(|&v| v == 0.0 || v == 1.0);
        let kind = kind.unwrap_or(match (binary, label_names.len()) {
            (true, 1) => TaskKind::Binary,
            (true, _) => TaskKind::Multilabel,
            _ => TaskKind::Regression,
        });
        if kind != TaskKind::Regression && !binary {
            return Err(Error::Dataset("classification labels must be 0 or 1".into()));
        }
        Ok(Self {
            kind,
            label_names,
            rows,
        })
    }

    /// Delimited text with a header. `smiles` is required, `smiles_2` makes a
    /// pair dataset, every other column is a label; empty cells are missing.
    pub fn read_csv(text: &str, kind: Option<TaskKind>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| Error::Dataset(e.to_string()))?.clone();
        let col = |name: &str| header.iter().position(|h| h == name);
        let smiles_col = col("smiles").ok_or_else(|| Error::Dataset("missing \"smiles\" column".into()))?;
        let pair_col = col("smiles_2");
        let label_cols: Vec<usize> = (0..header.len())
            .filter(|&i| i != smiles_col && Some(i) != pair_col)
            .collect();
        let names = label_cols.iter().map(|&i| header[i].to_string()).collect();
        let mut records = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Dataset(e.to_string()))?;
            let labels = label_cols
                .iter()
                .map(|&i| match rec.get(i).unwrap_or("") {
                    "" => Ok(None),
                    v => v
                        .parse::<f64>()
                        .map(Some)
                        .map_err(|_| Error::Dataset(format!("row {line}: bad label {v:?}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            let smiles_2 = pair_col.map(|c| rec.get(c).unwrap_or("").to_string());
            records.push((rec.get(smiles_col).unwrap_or("").to_string(), smiles_2, labels));
        }
        Self::from_records(names, records, kind)
    }

    pub fn read_path(path: &Path, kind: Option<TaskKind>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(&text, kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded random split with rounded part sizes; the test part takes the rest.
pub fn random_split(n: usize, ratios: [f64; 3], seed: u64) -> Split {
    let total: f64 = ratios.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * ratios[0] / total).round() as usize;
    let n_valid = (((n as f64) * ratios[1] / total).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    Split {
        train: order[..n_train].to_vec(),
        valid: order[n_train..n_train + n_valid].to_vec(),
        test: order[n_train + n_valid..].to_vec(),
    }
}

/// 8:1:1 for single molecules, 7:1:2 for pairs.
pub fn default_split(dataset: &LabeledDataset, seed: u64) -> Split {
    let ratios = if dataset.is_pair() {
        [7.0, 1.0, 2.0]
    } else {
        [8.0, 1.0, 1.0]
    };
    random_split(dataset.rows.len(), ratios, seed)
}

/// One molecule in the first segment with a collection node.
pub fn assemble_single(mol: &MolGraph, vocab: &FeatureVocab) -> Result<BatchedGraph> {
    BatchedGraph::from_parts(&[(mol, Segment::First)], vocab, true)
}

/// `a` in the first segment, `b` in the second, one shared collection node.
pub fn assemble_pair(a: &MolGraph, b: &MolGraph, vocab: &FeatureVocab) -> Result<BatchedGraph> {
    BatchedGraph::from_parts(&[(a, Segment::First), (b, Segment::Second)], vocab, true)
}

pub fn assemble_row(row: &Row, vocab: &FeatureVocab) -> Result<BatchedGraph> {
    match &row.graph_2 {
        Some(b) => assemble_pair(&row.graph, b, vocab),
        None => assemble_single(&row.graph, vocab),
    }
}

param_struct!(
    /// Linear map from the graph representation to task outputs.
    TaskHead {
        w => "w",
        b => "b",
    }
);

impl TaskHead {
    pub fn init<R: Rng + ?Sized>(d: usize, arity: usize, rng: &mut R) -> Self {
        TaskHead {
            w: Tensor::glorot_uniform(arity, d, rng),
            b: Tensor::zeros(&[arity]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneParams<T = Tensor> {
    pub encoder: MolGNetParams<T>,
    pub head: TaskHead<T>,
}

impl<T> FinetuneParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&'static str, &T) -> U) -> FinetuneParams<U> {
        FinetuneParams {
            encoder: self.encoder.map(&mut f),
            head: self.head.map(&mut f),
        }
    }
}

impl FinetuneParams {
    pub fn from_named(config: &MolGNetConfig, arity: usize, named: &[(String, Tensor)]) -> Result<Self> {
        let encoder = MolGNetParams::from_named(config, named)?;
        let head = TaskHead::layout().try_map(|k, _| {
            let shape = if k == "w" {
                vec![arity, config.hidden]
            } else {
                vec![arity]
            };
            crate::params::take_named(named, &format!("task_head.{k}"), &shape)
        })?;
        Ok(Self { encoder, head })
    }
}

impl<T> ParamTree<T> for FinetuneParams<T> {
    fn visit(&self, f: &mut dyn FnMut(String, &T)) {
        self.encoder.visit(f);
        visit_prefixed(&self.head, "task_head.", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        self.encoder.visit_mut(f);
        crate::params::visit_prefixed_mut(&mut self.head, "task_head.", f);
    }

    fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = self.encoder.leaves_mut();
        out.extend(self.head.fields_mut());
        out
    }
}

/// Raw head outputs (`graphs x arity`) for a batch.
pub fn head_outputs<'t>(
    tape: &'t Tape,
    batch: &BatchedGraph,
    vars: &FinetuneParams<Var<'t>>,
    config: &MolGNetConfig,
    mode: Readout,
) -> Result<Var<'t>> {
    let out = forward_tape(batch, &vars.encoder, config)?;
    let rep = readout(tape, batch, out.nodes, mode)?;
    Ok(rep.matmul_nt(vars.head.w)?.add_row(vars.head.b)?)
}

/// Cross-entropy on logits for classification, squared error for
/// regression; missing labels carry zero weight.
pub fn task_loss<'t>(outputs: Var<'t>, labels: &[Vec<Option<f64>>], kind: TaskKind) -> Result<Var<'t>> {
    let targets: Vec<f64> = labels.iter().flatten().map(|v| v.unwrap_or(0.0)).collect();
    let weights: Vec<f64> = labels
        .iter()
        .flatten()
        .map(|v| if v.is_some() { 1.0 } else { 0.0 })
        .collect();
    Ok(match kind {
        TaskKind::Regression => outputs.mse(&targets, Some(&weights))?,
        _ => outputs.bce_with_logits(&targets, Some(&weights))?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    /// Stop once the validation metric reaches this value (at or above for
    /// AUC, at or below for RMSE).
    pub stop_at: Option<f64>,
    pub readout: Readout,
    pub optimizer: AdamConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            batch_size: 16,
            patience: 10,
            stop_at: None,
            readout: Readout::Collection,
            optimizer: AdamConfig {
                lr: 1e-4,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean AUC-ROC for classification, RMSE for regression.
    pub valid_metric: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub params: FinetuneParams,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub test: Report,
}

/// Evaluation summary. Fields not defined for the task kind are `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub kind: TaskKind,
    pub n: usize,
    pub auc_roc: Option<f64>,
    pub prc_auc: Option<f64>,
    pub f1: Option<f64>,
    pub rmse: Option<f64>,
}

/// Scores per row: sigmoid probabilities for classification, raw outputs for
/// regression.
pub fn predict(
    rows: &[&Row],
    params: &FinetuneParams,
    config: &MolGNetConfig,
    kind: TaskKind,
    mode: Readout,
    vocab: &FeatureVocab,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(32) {
        let graphs = chunk
            .iter()
            .map(|r| assemble_row(r, vocab))
            .collect::<Result<Vec<_>>>()?;
        let batch = BatchedGraph::concat(&graphs);
        let tape = Tape::new();
        let vars = params.map(bind_constant(&tape));
        let y = head_outputs(&tape, &batch, &vars, config, mode)?.to_tensor();
        for r in 0..y.rows() {
            out.push(match kind {
                TaskKind::Regression => y.row(r).to_vec(),
                _ => y.row(r).iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect(),
            });
        }
    }
    Ok(out)
}

/// Per-label columns of present (score, label) pairs.
fn columns(scores: &[Vec<f64>], rows: &[&Row]) -> Vec<(Vec<f64>, Vec<f64>)> {
    let arity = rows.first().map_or(0, |r| r.labels.len());
    (0..arity)
        .map(|k| {
            let mut s = Vec::new();
            let mut y = Vec::new();
            for (sc, row) in scores.iter().zip(rows) {
                if let Some(v) = row.labels[k] {
                    s.push(sc[k]);
                    y.push(v);
                }
            }
            (s, y)
        })
        .collect()
}

fn mean_defined(values: impl Iterator<Item = Result<f64>>) -> Option<f64> {
    let ok: Vec<f64> = values.filter_map(|v| v.ok()).collect();
    (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
}

/// Metrics of `params` on `rows`, averaged over labels where defined.
pub fn evaluate(
    rows: &[&Row],
    params: &FinetuneParams,
    config: &MolGNetConfig,
    kind: TaskKind,
    mode: Readout,
    vocab: &FeatureVocab,
) -> Result<Report> {
    let scores = predict(rows, params, config, kind, mode, vocab)?;
    let cols = columns(&scores, rows);
    let as_bool = |y: &[f64]| y.iter().map(|&v| v >= 0.5).collect::<Vec<bool>>();
    let mut report = Report {
        kind,
        n: rows.len(),
        auc_roc: None,
        prc_auc: None,
        f1: None,
        rmse: None,
    };
    match kind {
        TaskKind::Regression => {
            report.rmse = mean_defined(cols.iter().map(|(s, y)| rmse(s, y)));
        }
        _ => {
            report.auc_roc = mean_defined(cols.iter().map(|(s, y)| auc_roc(s, &as_bool(y))));
            report.prc_auc = mean_defined(cols.iter().map(|(s, y)| prc_auc(s, &as_bool(y))));
            report.f1 = mean_defined(cols.iter().map(|(s, y)| f1(s, &as_bool(y))));
        }
    }
    Ok(report)
}

fn validation_metric(report: &Report) -> Result<f64> {
    match report.kind {
        TaskKind::Regression => report.rmse,
        _ => report.auc_roc,
    }
    .ok_or_else(|| Error::Degenerate("validation split has no scorable labels".into()))
}

/// Trains `encoder` plus a fresh linear head on the training split and keeps
/// the parameters of the best validation epoch. Stops after `patience`
/// epochs without improvement.
pub fn finetune(
    dataset: &LabeledDataset,
    split: &Split,
    encoder: MolGNetParams,
    model: &MolGNetConfig,
    config: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneResult> {
    let init = FinetuneParams::with_fresh_head(encoder, model, dataset.arity(), seed);
    finetune_with(dataset, split, init, model, config, seed, |_| {})
}

impl FinetuneParams {
    /// Head drawn from `seed` alone, so two encoders paired with the same
    /// seed get the same head.
    pub fn with_fresh_head(encoder: MolGNetParams, model: &MolGNetConfig, arity: usize, seed: u64) -> Self {
        let head = TaskHead::init(model.hidden, arity, &mut ChaCha8Rng::seed_from_u64(seed));
        Self { encoder, head }
    }
}

/// [`finetune`] from explicit initial parameters, with a per-epoch callback.
/// `seed` drives the epoch order.
pub fn finetune_with(
    dataset: &LabeledDataset,
    split: &Split,
    init: FinetuneParams,
    model: &MolGNetConfig,
    config: &FinetuneConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FinetuneResult> {
    if split.train.is_empty() || split.valid.is_empty() {
        return Err(Error::Dataset(
            "fine-tuning needs non-empty train and valid splits".into(),
        ));
    }
    let named = crate::params::named_tensors(&init);
    let mut params = FinetuneParams::from_named(model, dataset.arity(), &named)?;
    let vocab = FeatureVocab::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut adam = Adam::new(config.optimizer);
    let graphs: Vec<BatchedGraph> = dataset
        .rows
        .iter()
        .map(|r| assemble_row(r, &vocab))
        .collect::<Result<_>>()?;
    let valid: Vec<&Row> = split.valid.iter().map(|&i| &dataset.rows[i]).collect();
    let higher_better = dataset.kind != TaskKind::Regression;

    let mut best: Option<(f64, usize, FinetuneParams)> = None;
    let mut history = Vec::new();
    let mut order = split.train.clone();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch = BatchedGraph::concat(&chunk.iter().map(|&i| graphs[i].clone()).collect::<Vec<_>>());
            let labels: Vec<Vec<Option<f64>>> = chunk.iter().map(|&i| dataset.rows[i].labels.clone()).collect();
            if labels.iter().flatten().all(Option::is_none) {
                continue;
            }
            let tape = Tape::new();
            let vars = params.map(bind_param(&tape));
            let y = head_outputs(&tape, &batch, &vars, model, config.readout)?;
            let loss = task_loss(y, &labels, dataset.kind)?;
            loss_sum += loss.value().item();
            batches += 1;
            tape.backward(loss)?;
            let grads = collect_grads(&vars);
            drop(vars);
            adam_update(&mut adam, &mut params, &grads)?;
        }
        let report = evaluate(&valid, &params, model, dataset.kind, config.readout, &vocab)?;
        let metric = validation_metric(&report)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            valid_metric: metric,
        };
        on_epoch(&record);
        history.push(record);
        let improved = best
            .as_ref()
            .is_none_or(|(b, _, _)| if higher_better { metric > *b } else { metric < *b });
        let reached = config
            .stop_at
            .is_some_and(|t| if higher_better { metric >= t } else { metric <= t });
        if improved {
            best = Some((metric, epoch, params.clone()));
        }
        let stale = best.as_ref().is_some_and(|(_, e, _)| epoch - e >= config.patience);
        if reached || stale {
            break;
        }
    }
    let (_, best_epoch, params) = best.ok_or_else(|| Error::Config("max_epochs must be at least 1".into()))?;
    let test_rows: Vec<&Row> = split.test.iter().map(|&i| &dataset.rows[i]).collect();
    let test = if test_rows.is_empty() {
        Report {
            kind: dataset.kind,
            n: 0,
            auc_roc: None,
            prc_auc: None,
            f1: None,
            rmse: None,
        }
    } else {
        evaluate(&test_rows, &params, model, dataset.kind, config.readout, &vocab)?
    };
    Ok(FinetuneResult {
        params,
        best_epoch,
        history,
        test,
    })
}

/// First epoch whose validation metric reaches `target`.
pub fn epochs_to_reach(history: &[EpochRecord], target: f64) -> Option<usize> {
    history.iter().find(|r| r.valid_metric >= target).map(|r| r.epoch)
}

fn check_pairs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Degenerate(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Probability that a random positive outranks a random negative, ties
/// counted half. Computed from average ranks.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_pairs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate("AUC-ROC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps tied average ranks integral.
    let mut twice_rank_sum = 0u64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let twice_rank = (i + 1 + j + 1) as u64;
        twice_rank_sum += twice_rank * idx[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        i = j + 1;
    }
    let twice_u = twice_rank_sum - (pos * (pos + 1)) as u64;
    Ok(twice_u as f64 / 2.0 / (pos * neg) as f64)
}

/// Area under the precision-recall step curve: precision at each distinct
/// threshold weighted by the recall gained there.
pub fn prc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_pairs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::Degenerate("PRC-AUC needs a positive".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut area, mut i) = (0usize, 0usize, 0.0, 0);
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let gained = idx[i..=j].iter().filter(|&&k| labels[k]).count();
        tp += gained;
        seen += j - i + 1;
        area += (gained as f64 / pos as f64) * (tp as f64 / seen as f64);
        i = j + 1;
    }
    Ok(area)
}

/// F1 of `score >= 0.5` predictions.
pub fn f1(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_pairs(scores, labels)?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= 0.5, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp + fp + fneg == 0 {
        return Err(Error::Degenerate("F1 undefined without positives".into()));
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64)
}

pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::Degenerate("rmse needs equal, non-empty inputs".into()));
    }
    let mse = predictions
        .iter()
        .zip(targets)
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / targets.len() as f64;
    Ok(mse.sqrt())
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Davies-Bouldin index with Euclidean centroid distances and mean distance
/// to centroid as scatter. Lower is better separated.
pub fn davies_bouldin(points: &[Vec<f64>], clusters: &[usize]) -> Result<f64> {
    if points.len() != clusters.len() || points.is_empty() {
        return Err(Error::Degenerate("one cluster id per point required".into()));
    }
    let k = clusters.iter().max().map_or(0, |m| m + 1);
    let dim = points[0].len();
    let mut centroids = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(clusters) {
        counts[c] += 1;
        centroids[c].iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    let live: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();
    if live.len() < 2 {
        return Err(Error::Degenerate("Davies-Bouldin needs at least two clusters".into()));
    }
    for &c in &live {
        centroids[c].iter_mut().for_each(|a| *a /= counts[c] as f64);
    }
    let mut scatter = vec![0.0; k];
    for (p, &c) in points.iter().zip(clusters) {
        scatter[c] += distance(p, &centroids[c]) / counts[c] as f64;
    }
    let mut total = 0.0;
    for &i in &live {
        let mut worst = 0.0f64;
        for &j in live.iter().filter(|&&j| j != i) {
            let d = distance(&centroids[i], &centroids[j]);
            if d == 0.0 {
                return Err(Error::Degenerate(format!("clusters {i} and {j} share a centroid")));
            }
            worst = worst.max((scatter[i] + scatter[j]) / d);
        }
        total += worst;
    }
    Ok(total / live.len() as f64)
}

/// Graph representations of single molecules, one row each.
pub fn embed_molecules(
    graphs: &[MolGraph],
    encoder: &MolGNetParams,
    config: &MolGNetConfig,
    mode: Readout,
) -> Result<Vec<Vec<f64>>> {
    let vocab = FeatureVocab::default();
    let mut out = Vec::with_capacity(graphs.len());
    for chunk in graphs.chunks(32) {
        let parts = chunk
            .iter()
            .map(|g| assemble_single(g, &vocab))
            .collect::<Result<Vec<_>>>()?;
        let batch = BatchedGraph::concat(&parts);
        let tape = Tape::new();
        let vars = encoder.map(bind_constant(&tape));
        let nodes = forward_tape(&batch, &vars, config)?.nodes;
        out.extend(readout(&tape, &batch, nodes, mode)?.to_tensor().to_rows());
    }
    Ok(out)
}

/// Valid molecules against copies with shuffled atom records (seeded per
/// molecule from `seed`). Returns the Davies-Bouldin index of the two groups
/// under each parameter set, untrained first.
pub fn validity_separation_experiment(
    corpus: &[MolGraph],
    untrained: &MolGNetParams,
    pretrained: &MolGNetParams,
    config: &MolGNetConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    if corpus.len() < 100 {
        return Err(Error::Dataset(format!(
            "validity experiment needs 100 molecules, got {}",
            corpus.len()
        )));
    }
    let mut all: Vec<MolGraph> = corpus.to_vec();
    all.extend(
        corpus
            .iter()
            .enumerate()
            .map(|(i, g)| shuffle_atom_features(g, seed.wrapping_add(i as u64))),
    );
    let clusters: Vec<usize> = (0..all.len()).map(|i| usize::from(i >= corpus.len())).collect();
    let db = |p: &MolGNetParams| -> Result<f64> {
        let emb = embed_molecules(&all, p, config, Readout::Collection)?;
        davies_bouldin(&emb, &clusters)
    };
    Ok((db(untrained)?, db(pretrained)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_fixtures() {
        assert_eq!(
            auc_roc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(),
            0.75
        );
        assert_eq!(
            auc_roc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(),
            1.0
        );
        assert_eq!(auc_roc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert!(matches!(auc_roc(&[0.1, 0.2], &[true, true]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn other_metric_fixtures() {
        assert_eq!(rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), (12.5f64).sqrt());
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(f1(&[1.0, 0.0, 1.0], &[true, false, true]).unwrap(), 1.0);
        assert_eq!(prc_auc(&[0.9, 0.1, 0.2], &[true, false, false]).unwrap(), 1.0);
        // Ranking: pos, neg, pos -> precision 1 at recall 1/2, 2/3 at recall 1.
        let ap = prc_auc(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert!(f1(&[0.1], &[false]).is_err());
    }

    #[test]
    fn davies_bouldin_fixtures() {
        let pts: Vec<Vec<f64>> = [-1.5, -0.5, 0.5, 1.5].iter().map(|&x| vec![x]).collect();
        assert!((davies_bouldin(&pts, &[0, 0, 1, 1]).unwrap() - 0.5).abs() < 1e-12);
        let far = vec![vec![0.0], vec![1e-6], vec![100.0], vec![100.0 + 1e-6]];
        assert!(davies_bouldin(&far, &[0, 0, 1, 1]).unwrap() < 1e-7);
        assert!(davies_bouldin(&[vec![1.0], vec![1.0]], &[0, 1]).is_err());
        assert!(davies_bouldin(&pts, &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn split_ratios_and_disjointness() {
        let s = random_split(100, [8.0, 1.0, 1.0], 3);
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (80, 10, 10));
        let s2 = random_split(50, [7.0, 1.0, 2.0], 3);
        assert_eq!((s2.train.len(), s2.valid.len(), s2.test.len()), (35, 5, 10));
        let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(s, random_split(100, [8.0, 1.0, 1.0], 3));
    }

    #[test]
    fn csv_reading() {
        let text = "smiles,tox,sol\nCCO,1,\nc1ccccc1,0,1\n";
        let d = LabeledDataset::read_csv(text, None).unwrap();
        assert_eq!(d.kind, TaskKind::Multilabel);
        assert_eq!(d.label_names, vec!["tox", "sol"]);
        assert_eq!(d.rows[0].labels, vec![Some(1.0), None]);
        assert!(!d.is_pair());
        let pairs = LabeledDataset::read_csv("smiles,smiles_2,y\nCC,CO,1\nCN,CC,0\n", None).unwrap();
        assert!(pairs.is_pair() && pairs.kind == TaskKind::Binary);
        let reg = LabeledDataset::read_csv("smiles,y\nCC,0.5\n", None).unwrap();
        assert_eq!(reg.kind, TaskKind::Regression);
        assert!(LabeledDataset::read_csv("smi,y\nCC,1\n", None).is_err());
        assert!(LabeledDataset::read_csv("smiles,y\nC(,1\n", None).is_err());
    }

    #[test]
    fn assembly_shapes() {
        let vocab = FeatureVocab::default();
        let a = parse_smiles("CCC", true).unwrap();
        let b = parse_smiles("CCCO", true).unwrap();
        let p = assemble_pair(&a, &b, &vocab).unwrap();
        assert_eq!(p.n_nodes(), 8);
        assert_eq!(
            p.arcs
                .iter()
                .filter(|x| x.kind == crate::molgnet::ArcKind::Virtual)
                .count(),
            7
        );
        let q = assemble_pair(&b, &a, &vocab).unwrap();
        assert_eq!(p.n_nodes(), q.n_nodes());
        let s = assemble_single(&parse_smiles("CCOCC", true).unwrap(), &vocab).unwrap();
        assert_eq!(s.n_nodes(), 6);
        assert!(s.node_segment.iter().all(|&g| g != Segment::Second));
    }
}
