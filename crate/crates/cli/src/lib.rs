//! Library side of the `mpg` binary: run configuration, checkpoint glue and
//! one function per subcommand. Commands write human output to `out` and
//! notices to `err`, so tests can drive them without spawning processes.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mpg_core::checkpoint::{Checkpoint, Precision};
use mpg_core::chem::{parse_smiles, AtomRecord, BondRecord, FeatureVocab, MolGraph};
use mpg_core::molgnet::{collection_attention_weights, forward, gradcheck_model, MolGNetParams, Readout};
use mpg_core::numcore::gradcheck::{op_suite, GradCheckReport, DEFAULT_STEP, MODEL_STEP};
use mpg_core::params::{named_tensors, round_to_f32, ParamTree};
use mpg_core::ssl::{MetricsRecord, Pretrainer, StepMetrics};
use mpg_core::tasks::{
    assemble_single, default_split, embed_molecules, evaluate, finetune_with, FinetuneParams, LabeledDataset, Row,
};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::{Paths, RunConfig};

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<mpg_core::Error> for CliError {
    fn from(e: mpg_core::Error) -> Self {
        use mpg_core::Error as E;
        match e {
            E::Num(_) => CliError::Numerical(e.to_string()),
            E::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> CliResult<&'a Path> {
    path.as_deref()
        .ok_or_else(|| CliError::Usage(format!("no {what} path given")))
}

/// Hex SHA-256 over parameter names, shapes and value bits.
pub fn params_hash<P: ParamTree<mpg_core::numcore::Tensor>>(params: &P) -> String {
    let mut h = Sha256::new();
    params.visit(&mut |name, t| {
        h.update(name.as_bytes());
        t.shape().iter().for_each(|d| h.update((*d as u64).to_le_bytes()));
        t.data().iter().for_each(|v| h.update(v.to_le_bytes()));
    });
    hex::encode(h.finalize())
}

/// Molecules from a corpus file: either a table with a `smiles` header
/// column, or one SMILES per line (first whitespace-separated token).
/// Blank lines and lines starting with `#` are skipped.
pub fn read_corpus(path: &Path) -> CliResult<Vec<(String, MolGraph)>> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
    let mut column = None;
    let mut body: Vec<(usize, &str)> = Vec::new();
    if let Some((i, first)) = lines.next() {
        let header: Vec<&str> = first.split(',').map(str::trim).collect();
        match header.iter().position(|h| *h == "smiles") {
            Some(c) => column = Some(c),
            None => body.push((i, first)),
        }
    }
    body.extend(lines);
    body.into_iter()
        .map(|(i, line)| {
            let smiles = match column {
                Some(c) => line.split(',').nth(c).unwrap_or("").trim(),
                None => line.split_whitespace().next().unwrap_or(""),
            };
            parse_smiles(smiles, true)
                .map(|g| (smiles.to_string(), g))
                .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn save_checkpoint<P: ParamTree<mpg_core::numcore::Tensor>>(
    path: &Path,
    config: &RunConfig,
    step: u64,
    params: &P,
) -> CliResult {
    let ck = Checkpoint {
        precision: config.precision,
        step,
        config: config.snapshot()?,
        tensors: named_tensors(params),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
    }
    ck.save(path)?;
    Ok(())
}

/// Loads a checkpoint and rejects it when its model configuration differs
/// from the active one.
pub fn load_checkpoint(path: &Path, config: &RunConfig) -> CliResult<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    let stored = RunConfig::from_toml(&ck.config)
        .map_err(|e| CliError::Data(format!("{}: stored config unreadable: {e}", path.display())))?;
    if stored.model != config.model {
        return Err(CliError::Data(format!(
            "{}: checkpoint model config differs from the active config (stored {:?}, active {:?})",
            path.display(),
            stored.model,
            config.model
        )));
    }
    Ok(ck)
}

#[derive(Serialize)]
struct EvalLine<'a> {
    step: usize,
    split: &'a str,
    psd_loss: f64,
    mask_loss: f64,
    psd_acc: f64,
    mask_acc: f64,
}

impl<'a> EvalLine<'a> {
    fn new(step: usize, split: &'a str, m: &StepMetrics) -> Self {
        Self {
            step,
            split,
            psd_loss: m.psd_loss,
            mask_loss: m.mask_loss,
            psd_acc: m.psd_acc,
            mask_acc: m.mask_acc,
        }
    }
}

fn json_line(w: &mut dyn Write, value: &impl Serialize) -> CliResult {
    let s = serde_json::to_string(value).map_err(|e| CliError::Data(e.to_string()))?;
    writeln!(w, "{s}")?;
    Ok(())
}

pub const CHECKPOINT_EVERY: usize = 100;

pub struct PretrainOutcome {
    pub final_checkpoint: PathBuf,
    pub held_out: StepMetrics,
}

fn checkpoint_name(step: usize) -> String {
    format!("step-{step:06}.ckpt")
}

/// Joint pre-training with checkpoints every [`CHECKPOINT_EVERY`] steps and
/// at the end, plus a JSON-lines metrics log.
pub fn cmd_pretrain(config: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<PretrainOutcome> {
    config.validate()?;
    let corpus_path = require(&config.paths.corpus, "corpus")?;
    let out_dir = require(&config.paths.out, "output directory")?;
    let corpus: Vec<MolGraph> = read_corpus(corpus_path)?.into_iter().map(|(_, g)| g).collect();
    fs::create_dir_all(out_dir).map_err(io_at(out_dir))?;
    let log_path = config
        .paths
        .log
        .clone()
        .unwrap_or_else(|| out_dir.join("metrics.jsonl"));
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path).map_err(io_at(&log_path))?);

    let mut trainer = Pretrainer::new(corpus, config.model.clone(), config.pretrain.clone(), config.seed)?;
    if config.precision == Precision::F32 {
        trainer.set_f32_params(true);
    }
    writeln!(err, "init hash {}", params_hash(&trainer.params))?;
    writeln!(
        err,
        "{} training / {} held-out molecules, {} steps",
        trainer.train_molecules().len(),
        trainer.held_out_molecules().len(),
        config.pretrain.steps
    )?;
    let held = trainer.held_out_samples(config.seed.wrapping_add(1))?;
    for step in 1..=config.pretrain.steps {
        let m = trainer.train_step()?;
        if !m.total_loss.is_finite() {
            return Err(CliError::Numerical(format!("non-finite loss at step {step}")));
        }
        MetricsRecord::new(step, &m).write_line(&mut log)?;
        if step % CHECKPOINT_EVERY == 0 && step != config.pretrain.steps {
            save_checkpoint(
                &out_dir.join(checkpoint_name(step)),
                config,
                step as u64,
                &trainer.params,
            )?;
            let e = trainer.evaluate(&held)?;
            json_line(&mut log, &EvalLine::new(step, "held_out", &e))?;
            writeln!(
                err,
                "step {step}: held-out psd acc {:.3}, mask acc {:.3}",
                e.psd_acc, e.mask_acc
            )?;
        }
    }
    let steps = config.pretrain.steps;
    let held_out = trainer.evaluate(&held)?;
    json_line(&mut log, &EvalLine::new(steps, "held_out", &held_out))?;
    log.flush()?;
    let final_checkpoint = out_dir.join("final.ckpt");
    save_checkpoint(&final_checkpoint, config, steps as u64, &trainer.params)?;
    writeln!(
        out,
        "held-out psd_acc {:.4} mask_acc {:.4}",
        held_out.psd_acc, held_out.mask_acc
    )?;
    writeln!(out, "checkpoint {}", final_checkpoint.display())?;
    Ok(PretrainOutcome {
        final_checkpoint,
        held_out,
    })
}

/// Encoder parameters: from the checkpoint, or freshly drawn from the seed
/// with `no_pretrain`.
fn initial_encoder(config: &RunConfig, no_pretrain: bool) -> CliResult<MolGNetParams> {
    if no_pretrain {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(config.seed);
        return Ok(MolGNetParams::init(&config.model, &mut rng)?);
    }
    let path = config
        .paths
        .checkpoint
        .as_deref()
        .ok_or_else(|| CliError::Usage("fine-tuning needs --checkpoint or --no-pretrain".into()))?;
    let ck = load_checkpoint(path, config)?;
    Ok(MolGNetParams::from_named(&config.model, &ck.tensors)?)
}

pub const SPLIT_NOTICE: &str =
    "NOTICE: using a seeded RANDOM split (8:1:1 single, 7:1:2 pairs); scaffold splitting is not implemented";

pub fn cmd_finetune(
    config: &RunConfig,
    no_pretrain: bool,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CliResult<mpg_core::tasks::FinetuneResult> {
    config.validate()?;
    let data_path = require(&config.paths.dataset, "dataset")?;
    let dataset = LabeledDataset::read_path(data_path, None)?;
    let encoder = initial_encoder(config, no_pretrain)?;
    let init = FinetuneParams::with_fresh_head(encoder, &config.model, dataset.arity(), config.seed);
    writeln!(err, "{SPLIT_NOTICE}")?;
    writeln!(
        err,
        "init hash encoder {} head {}",
        params_hash(&init.encoder),
        params_hash(&init.head)
    )?;
    writeln!(
        err,
        "{} rows, {} label(s), {:?}, {} input",
        dataset.rows.len(),
        dataset.arity(),
        dataset.kind,
        if dataset.is_pair() { "pair" } else { "single" }
    )?;
    let split = default_split(&dataset, config.seed);
    let mut log: Option<Box<dyn Write>> = match (&config.paths.log, &config.paths.out) {
        (Some(p), _) => Some(Box::new(fs::File::create(p).map_err(io_at(p))?)),
        (None, Some(dir)) => {
            fs::create_dir_all(dir).map_err(io_at(dir))?;
            let p = dir.join("finetune.jsonl");
            Some(Box::new(fs::File::create(&p).map_err(io_at(&p))?))
        }
        _ => None,
    };
    let mut log_err = None;
    let result = finetune_with(
        &dataset,
        &split,
        init,
        &config.model,
        &config.finetune,
        config.seed,
        |rec| {
            let _ = writeln!(
                err,
                "epoch {} loss {:.4} valid {:.4}",
                rec.epoch, rec.train_loss, rec.valid_metric
            );
            if let Some(l) = log.as_mut() {
                if let Err(e) = json_line(l, rec) {
                    log_err.get_or_insert(e);
                }
            }
        },
    )?;
    if let Some(e) = log_err {
        return Err(e);
    }
    let mut params = result.params.clone();
    if config.precision == Precision::F32 {
        round_to_f32(&mut params);
    }
    if let Some(dir) = &config.paths.out {
        save_checkpoint(&dir.join("finetuned.ckpt"), config, result.best_epoch as u64, &params)?;
        let report = serde_json::to_string_pretty(&result.test).map_err(|e| CliError::Data(e.to_string()))?;
        let p = dir.join("report.json");
        fs::write(&p, report).map_err(io_at(&p))?;
    }
    writeln!(out, "best epoch {}", result.best_epoch)?;
    json_line(out, &result.test)?;
    Ok(result)
}

/// Writes `smiles,v1,...,vd` per molecule.
pub fn cmd_embed(config: &RunConfig, out: &mut dyn Write) -> CliResult<usize> {
    let ck = load_checkpoint(require(&config.paths.checkpoint, "checkpoint")?, config)?;
    let encoder = MolGNetParams::from_named(&config.model, &ck.tensors)?;
    let corpus = read_corpus(require(&config.paths.corpus, "corpus")?)?;
    let graphs: Vec<MolGraph> = corpus.iter().map(|(_, g)| g.clone()).collect();
    let rows = embed_molecules(&graphs, &encoder, &config.model, config.finetune.readout)?;
    let mut text = String::new();
    for ((smiles, _), row) in corpus.iter().zip(&rows) {
        text.push_str(smiles);
        for v in row {
            text.push_str(&format!(",{v:e}"));
        }
        text.push('\n');
    }
    match &config.paths.out {
        Some(p) => fs::write(p, text).map_err(io_at(p))?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(rows.len())
}

/// Per-atom collection attention weights `(atom, element, weight)`.
pub fn cmd_attend(config: &RunConfig, smiles: &str, out: &mut dyn Write) -> CliResult<Vec<(usize, String, f64)>> {
    let ck = load_checkpoint(require(&config.paths.checkpoint, "checkpoint")?, config)?;
    let encoder = MolGNetParams::from_named(&config.model, &ck.tensors)?;
    let graph = parse_smiles(smiles, true).map_err(|e| CliError::Data(e.to_string()))?;
    let batch = assemble_single(&graph, &FeatureVocab::default())?;
    let fwd = forward(&batch, &encoder, &config.model)?;
    let weights = collection_attention_weights(&fwd.attention, &batch)?;
    let rows: Vec<(usize, String, f64)> = weights
        .first()
        .map(|w| {
            w.iter()
                .map(|&(i, v)| (i, graph.atoms[i].element.symbol().to_string(), v))
                .collect()
        })
        .unwrap_or_default();
    for (i, el, w) in &rows {
        writeln!(out, "{i}\t{el}\t{w:.6}")?;
    }
    Ok(rows)
}

pub const GRADCHECK_MOLECULE: &str = "CC(=O)N";

/// Every tape operation plus the full model on a four-atom molecule. Large
/// tensors are probed at `max_coords` sampled coordinates.
pub fn run_gradcheck(config: &RunConfig, tol: f64, max_coords: Option<usize>) -> CliResult<Vec<GradCheckReport>> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(config.seed);
    let mut reports = op_suite(DEFAULT_STEP, tol, &mut rng).map_err(mpg_core::Error::from)?;
    let graph = parse_smiles(GRADCHECK_MOLECULE, true).map_err(|e| CliError::Data(e.to_string()))?;
    let batch = assemble_single(&graph, &FeatureVocab::default())?;
    let params = MolGNetParams::init(&config.model, &mut rng)?;
    let model = gradcheck_model(&batch, &params, &config.model, MODEL_STEP, tol, max_coords, &mut rng)?;
    reports.extend(model.into_iter().map(|mut r| {
        r.name = format!("model.{}", r.name);
        r
    }));
    Ok(reports)
}

pub fn cmd_gradcheck(config: &RunConfig, max_coords: Option<usize>, out: &mut dyn Write) -> CliResult<()> {
    config.validate()?;
    if config.precision != Precision::F64 {
        return Err(CliError::Usage("gradient checks run in 64-bit mode only".into()));
    }
    let reports = run_gradcheck(config, 1e-4, max_coords)?;
    let mut failed = 0;
    for r in &reports {
        writeln!(
            out,
            "{:<40} {:>6} coords  max rel err {:.3e}  {}",
            r.name,
            r.checked,
            r.max_rel_err,
            if r.passed { "ok" } else { "FAIL" }
        )?;
        failed += usize::from(!r.passed);
    }
    writeln!(out, "{} checks, {failed} failed", reports.len())?;
    if failed > 0 {
        return Err(CliError::Numerical(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

/// Scores a fine-tuned checkpoint on every row of a dataset.
pub fn cmd_eval(config: &RunConfig, out: &mut dyn Write) -> CliResult<mpg_core::tasks::Report> {
    let ck = load_checkpoint(require(&config.paths.checkpoint, "checkpoint")?, config)?;
    let dataset = LabeledDataset::read_path(require(&config.paths.dataset, "dataset")?, None)?;
    let params = FinetuneParams::from_named(&config.model, dataset.arity(), &ck.tensors)?;
    let rows: Vec<&Row> = dataset.rows.iter().collect();
    let report = evaluate(
        &rows,
        &params,
        &config.model,
        dataset.kind,
        config.finetune.readout,
        &FeatureVocab::default(),
    )?;
    json_line(out, &report)?;
    Ok(report)
}

/// One `parse` output line.
#[derive(Debug, Serialize)]
pub struct ParseRecord {
    pub smiles: String,
    pub valid: bool,
    pub error: Option<String>,
    pub atoms: Vec<AtomRecord>,
    pub bonds: Vec<BondRecord>,
}

pub fn parse_record(smiles: &str, check_valence: bool) -> ParseRecord {
    let mut rec = ParseRecord {
        smiles: smiles.to_string(),
        valid: false,
        error: None,
        atoms: vec![],
        bonds: vec![],
    };
    match parse_smiles(smiles, false) {
        Ok(g) => {
            let verdict = if check_valence {
                mpg_core::chem::check_valence(&g)
            } else {
                Ok(())
            };
            rec.valid = verdict.is_ok();
            rec.error = verdict.err().map(|e| e.to_string());
            rec.atoms = g.atoms;
            rec.bonds = g.bonds;
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec
}

/// Writes one record per SMILES. Valence failures are verdicts; strings
/// that do not parse at all make the command fail after every record is
/// written.
pub fn cmd_parse(smiles: &[String], check_valence: bool, out: &mut dyn Write) -> CliResult<Vec<ParseRecord>> {
    let records: Vec<ParseRecord> = smiles.iter().map(|s| parse_record(s, check_valence)).collect();
    for r in &records {
        json_line(out, r)?;
    }
    let unparsed = records.iter().filter(|r| r.atoms.is_empty() && !r.valid).count();
    if unparsed > 0 {
        return Err(CliError::Data(format!(
            "{unparsed} of {} inputs are not valid SMILES",
            records.len()
        )));
    }
    Ok(records)
}

/// Readout used by embedding; exported so callers can name it in flags.
pub fn parse_readout(s: &str) -> CliResult<Readout> {
    match s {
        "collection" => Ok(Readout::Collection),
        "mean" | "mean_pool" => Ok(Readout::MeanPool),
        other => Err(CliError::Usage(format!("unknown readout {other:?}"))),
    }
}
