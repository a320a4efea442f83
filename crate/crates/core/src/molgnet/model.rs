use super::{ArcKind, BatchedGraph, GruBlend, LayerParams, MolGNetConfig, MolGNetParams, Readout, Segment};
use crate::numcore::{Tape, Tensor, Var};
use crate::params::bind_constant;
use crate::{Error, Result};

/// Tape-level forward result. `attention[layer][step]` is `arcs x heads`,
/// rows aligned with `batch.arcs`.
pub struct ForwardVars<'t> {
    pub nodes: Var<'t>,
    pub attention: Vec<Vec<Var<'t>>>,
}

/// Detached forward result.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub nodes: Tensor,
    pub attention: Vec<Vec<Tensor>>,
}

/// Node states `x0` (`nodes x d`) and constant edge states `e` (`arcs x d`).
pub fn embed_inputs<'t>(batch: &BatchedGraph, embed: &super::EmbedParams<Var<'t>>) -> Result<(Var<'t>, Var<'t>)> {
    let n = batch.n_nodes();
    let (mut flat, mut owner) = (Vec::new(), Vec::new());
    for (i, feats) in batch.node_features.iter().enumerate() {
        flat.extend_from_slice(feats);
        owner.extend(std::iter::repeat(i).take(feats.len()));
    }
    let seg: Vec<usize> = batch.node_segment.iter().map(|s| s.index()).collect();
    let x0 = embed
        .atom
        .gather_rows(&flat)?
        .scatter_add_rows(&owner, n)?
        .add(embed.segment.gather_rows(&seg)?)?;

    let n_arcs = batch.arcs.len();
    let (mut bflat, mut bowner, mut vowner, mut aseg) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (r, arc) in batch.arcs.iter().enumerate() {
        match &arc.kind {
            ArcKind::Bond { features, segment } => {
                bflat.extend_from_slice(features);
                bowner.extend(std::iter::repeat(r).take(features.len()));
                aseg.push(segment.index());
            }
            ArcKind::Virtual => {
                vowner.push(r);
                aseg.push(Segment::Collect.index());
            }
        }
    }
    let mut e = embed.segment.gather_rows(&aseg)?;
    if !bflat.is_empty() {
        e = e.add(embed.bond.gather_rows(&bflat)?.scatter_add_rows(&bowner, n_arcs)?)?;
    }
    if !vowner.is_empty() {
        let virt = embed.virtual_edge.gather_rows(&vec![0; vowner.len()])?;
        e = e.add(virt.scatter_add_rows(&vowner, n_arcs)?)?;
    }
    Ok((x0, e))
}

/// Fails when an ordinary node has no incoming arc and its graph has no
/// collection node to give it context.
pub fn check_isolated(batch: &BatchedGraph) -> Result<()> {
    let mut has_incoming = vec![false; batch.n_nodes()];
    for a in &batch.arcs {
        has_incoming[a.target] = true;
    }
    for node in 0..batch.n_nodes() {
        if batch.is_collection(node) || has_incoming[node] {
            continue;
        }
        if batch.collection[batch.node_graph[node]].is_none() {
            return Err(Error::IsolatedNode { node });
        }
    }
    Ok(())
}

/// Multi-head attention over each node's incoming arcs. Returns the messages
/// (`nodes x d`) and the attention weights (`arcs x heads`).
pub fn neighbor_attention<'t>(
    x: Var<'t>,
    e: Var<'t>,
    batch: &BatchedGraph,
    layer: &LayerParams<Var<'t>>,
    config: &MolGNetConfig,
) -> Result<(Var<'t>, Var<'t>)> {
    check_isolated(batch)?;
    let src: Vec<usize> = batch.arcs.iter().map(|a| a.source).collect();
    let tgt: Vec<usize> = batch.arcs.iter().map(|a| a.target).collect();
    let q = x.matmul_nt(layer.wq)?.gather_rows(&tgt)?;
    let inc = x.gather_rows(&src)?.add(e)?;
    let k = inc.matmul_nt(layer.wk)?;
    let v = inc.matmul_nt(layer.wv)?;
    let scores = q
        .head_dot(k, config.heads)?
        .scale(1.0 / (config.head_dim() as f64).sqrt());
    let attn = scores.segment_softmax(&tgt)?;
    let agg = v.head_scale(attn)?.scatter_add_rows(&tgt, batch.n_nodes())?;
    Ok((agg.matmul_nt(layer.wm)?, attn))
}

fn linear<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    Ok(x.matmul_nt(w)?.add_row(b)?)
}

/// Attention, feed-forward and GRU update for one step. Returns
/// `(x', h', attention)` with `x' = h'`.
pub fn message_passing_step<'t>(
    x: Var<'t>,
    h: Var<'t>,
    e: Var<'t>,
    batch: &BatchedGraph,
    layer: &LayerParams<Var<'t>>,
    config: &MolGNetConfig,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let eps = config.layer_norm_eps;
    let (msg, attn) = neighbor_attention(x, e, batch, layer, config)?;
    let u1 = x.add(msg)?.layer_norm(layer.norm1_gamma, layer.norm1_beta, eps)?;
    let ff = linear(linear(u1, layer.w1, layer.b1)?.gelu(), layer.w2, layer.b2)?;
    let m = u1.add(ff)?.layer_norm(layer.norm2_gamma, layer.norm2_beta, eps)?;

    let r = linear(m, layer.w_mr, layer.b_mr)?
        .add(linear(h, layer.w_xr, layer.b_hr)?)?
        .sigmoid();
    let u = linear(m, layer.w_mu, layer.b_mu)?
        .add(linear(h, layer.w_xu, layer.b_hu)?)?
        .sigmoid();
    let c = linear(m, layer.w_in, layer.b_in)?
        .add(r.mul(linear(h, layer.w_hn, layer.b_hn)?)?)?
        .tanh();
    let carry = match config.gru_blend {
        GruBlend::NodeState => x,
        GruBlend::Hidden => h,
    };
    let h_next = carry.add(u.mul(c.sub(carry)?)?)?;
    Ok((h_next, h_next, attn))
}

/// Full encoder on a tape. The hidden state resets to the node state at the
/// start of every layer; edge states stay fixed.
pub fn forward_tape<'t>(
    batch: &BatchedGraph,
    params: &MolGNetParams<Var<'t>>,
    config: &MolGNetConfig,
) -> Result<ForwardVars<'t>> {
    if params.layers.len() != config.n_layers {
        return Err(Error::Config(format!(
            "config has {} layers, parameters have {}",
            config.n_layers,
            params.layers.len()
        )));
    }
    let (mut x, e) = embed_inputs(batch, &params.embed)?;
    let mut attention = Vec::with_capacity(config.n_layers);
    for layer in &params.layers {
        let mut h = x;
        let mut steps = Vec::with_capacity(config.steps_per_layer);
        for _ in 0..config.steps_per_layer {
            let (xn, hn, a) = message_passing_step(x, h, e, batch, layer, config)?;
            x = xn;
            h = hn;
            steps.push(a);
        }
        attention.push(steps);
    }
    Ok(ForwardVars { nodes: x, attention })
}

/// Inference forward with parameters held as constants.
pub fn forward(batch: &BatchedGraph, params: &MolGNetParams, config: &MolGNetConfig) -> Result<ForwardOutput> {
    let tape = Tape::new();
    let vars = params.map(bind_constant(&tape));
    let out = forward_tape(batch, &vars, config)?;
    Ok(ForwardOutput {
        nodes: out.nodes.to_tensor(),
        attention: out
            .attention
            .iter()
            .map(|l| l.iter().map(|a| a.to_tensor()).collect())
            .collect(),
    })
}

/// Collection-node rows, one per graph in graph order.
pub fn collection_embedding<'t>(batch: &BatchedGraph, nodes: Var<'t>) -> Result<Var<'t>> {
    let idx = collection_nodes(batch)?;
    Ok(nodes.gather_rows(&idx)?)
}

fn collection_nodes(batch: &BatchedGraph) -> Result<Vec<usize>> {
    batch
        .collection
        .iter()
        .enumerate()
        .map(|(g, c)| c.ok_or_else(|| Error::Structure(format!("graph {g} has no collection node"))))
        .collect()
}

/// Mean of each graph's ordinary node rows.
pub fn mean_pool<'t>(tape: &'t Tape, batch: &BatchedGraph, nodes: Var<'t>) -> Result<Var<'t>> {
    let (g, n) = (batch.n_graphs(), batch.n_nodes());
    let mut counts = vec![0usize; g];
    for i in (0..n).filter(|&i| !batch.is_collection(i)) {
        counts[batch.node_graph[i]] += 1;
    }
    let mut pool = Tensor::zeros(&[g, n]);
    for i in (0..n).filter(|&i| !batch.is_collection(i)) {
        let gi = batch.node_graph[i];
        pool.data_mut()[gi * n + i] = 1.0 / counts[gi] as f64;
    }
    if counts.contains(&0) {
        return Err(Error::Structure("graph without ordinary nodes".into()));
    }
    Ok(tape.constant(pool).matmul(nodes)?)
}

/// Graph-level representation chosen by `readout`.
pub fn readout<'t>(tape: &'t Tape, batch: &BatchedGraph, nodes: Var<'t>, readout: Readout) -> Result<Var<'t>> {
    match readout {
        Readout::Collection => collection_embedding(batch, nodes),
        Readout::MeanPool => mean_pool(tape, batch, nodes),
    }
}

/// Per-graph `(node, weight)` lists from the last step of the last layer:
/// attention on arcs into the collection node, averaged over heads and
/// renormalized to sum to one.
pub fn collection_attention_weights(attention: &[Vec<Tensor>], batch: &BatchedGraph) -> Result<Vec<Vec<(usize, f64)>>> {
    let last = attention
        .last()
        .and_then(|l| l.last())
        .ok_or_else(|| Error::Structure("no retained attention".into()))?;
    if last.rows() != batch.arcs.len() {
        return Err(Error::Structure("attention does not match the batch arcs".into()));
    }
    let coll = collection_nodes(batch)?;
    let mut out = vec![Vec::new(); coll.len()];
    for (r, arc) in batch.arcs.iter().enumerate() {
        let g = batch.node_graph[arc.target];
        if arc.target == coll[g] {
            let row = last.row(r);
            out[g].push((arc.source, row.iter().sum::<f64>() / row.len() as f64));
        }
    }
    for weights in &mut out {
        let total: f64 = weights.iter().map(|w| w.1).sum();
        if weights.is_empty() || !(total > 0.0) {
            return Err(Error::Structure("collection node receives no attention".into()));
        }
        weights.iter_mut().for_each(|w| w.1 /= total);
    }
    Ok(out)
}

/// Finite-difference check of the full forward pass on `batch`, scored by a
/// fixed seeded weighting of the final node states. Tensors larger than
/// `max_coords` are probed at that many sampled coordinates.
pub fn gradcheck_model<R: rand::Rng + ?Sized>(
    batch: &BatchedGraph,
    params: &MolGNetParams,
    config: &MolGNetConfig,
    h: f64,
    tol: f64,
    max_coords: Option<usize>,
    rng: &mut R,
) -> Result<Vec<crate::numcore::gradcheck::GradCheckReport>> {
    let named = crate::params::named_tensors(params);
    let weights = Tensor::normal(&[batch.n_nodes(), config.hidden], 1.0, rng);
    crate::numcore::gradcheck::check_params(
        |tape, vars| {
            let mut it = vars.iter().copied();
            let bound = params.map(|_, _| it.next().expect("one variable per tensor"));
            let out = forward_tape(batch, &bound, config)?;
            Ok::<_, Error>(out.nodes.mul(tape.constant(weights.clone()))?.sum())
        },
        &named,
        h,
        tol,
        max_coords,
        rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::{parse_smiles, FeatureVocab};
    use crate::params::bind_param;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(smiles: &str, collect: bool, cfg: &MolGNetConfig, seed: u64) -> (BatchedGraph, MolGNetParams) {
        let m = parse_smiles(smiles, true).unwrap();
        let b = BatchedGraph::from_parts(&[(&m, Segment::First)], &FeatureVocab::default(), collect).unwrap();
        (
            b,
            MolGNetParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap(),
        )
    }

    #[test]
    fn zero_tables_give_zero_inputs() {
        let cfg = MolGNetConfig::with_dims(1, 1, 8, 2);
        let (b, mut p) = setup("CCO", true, &cfg, 1);
        p.embed = p.embed.map(|_, t| Tensor::zeros(t.shape()));
        let tape = Tape::new();
        let v = p.map(bind_constant(&tape));
        let (x0, e) = embed_inputs(&b, &v.embed).unwrap();
        assert!(x0.value().data().iter().all(|&z| z == 0.0));
        assert!(e.value().data().iter().all(|&z| z == 0.0));
    }

    #[test]
    fn single_atom_without_collection_is_isolated() {
        let cfg = MolGNetConfig::with_dims(1, 1, 8, 2);
        let (b, p) = setup("C", false, &cfg, 1);
        assert!(matches!(forward(&b, &p, &cfg), Err(Error::IsolatedNode { node: 0 })));
        let (b, p) = setup("C", true, &cfg, 1);
        assert!(forward(&b, &p, &cfg).is_ok());
    }

    #[test]
    fn attention_rows_sum_to_one_per_target() {
        let cfg = MolGNetConfig::with_dims(2, 2, 8, 2);
        let (b, p) = setup("CC(C)C(=O)N", true, &cfg, 4);
        let out = forward(&b, &p, &cfg).unwrap();
        assert_eq!(out.attention.len(), 2);
        for a in out.attention.iter().flatten() {
            let mut sums = vec![vec![0.0; cfg.heads]; b.n_nodes()];
            for (r, arc) in b.arcs.iter().enumerate() {
                for k in 0..cfg.heads {
                    sums[arc.target][k] += a.get2(r, k);
                }
            }
            for s in sums.iter().flatten() {
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gate_limits() {
        let cfg = MolGNetConfig::with_dims(1, 1, 8, 2);
        let (b, mut p) = setup("CCO", true, &cfg, 2);
        let run = |p: &MolGNetParams| {
            let tape = Tape::new();
            let v = p.map(bind_constant(&tape));
            let (x0, e) = embed_inputs(&b, &v.embed).unwrap();
            let (xn, _, _) = message_passing_step(x0, x0, e, &b, &v.layers[0], &cfg).unwrap();
            (x0.to_tensor(), xn.to_tensor())
        };
        p.layers[0].b_mu = Tensor::full(&[8], -60.0);
        let (x0, xn) = run(&p);
        assert!(x0.max_abs_diff(&xn) < 1e-12);
        p.layers[0].b_mu = Tensor::full(&[8], 60.0);
        let (_, xn) = run(&p);
        assert!(xn.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn collection_weights_are_normalized_and_symmetric() {
        let cfg = MolGNetConfig::with_dims(2, 2, 8, 2);
        let (b, p) = setup("CC", true, &cfg, 9);
        let out = forward(&b, &p, &cfg).unwrap();
        let w = collection_attention_weights(&out.attention, &b).unwrap();
        assert_eq!(w.len(), 1);
        assert!((w[0][0].1 - 0.5).abs() < 1e-12 && (w[0][1].1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn readouts_and_missing_collection() {
        let cfg = MolGNetConfig::with_dims(1, 1, 8, 2);
        let (b, p) = setup("CCO", true, &cfg, 3);
        let tape = Tape::new();
        let v = p.map(bind_param(&tape));
        let out = forward_tape(&b, &v, &cfg).unwrap();
        let c = collection_embedding(&b, out.nodes).unwrap();
        assert_eq!(c.value().row(0), out.nodes.value().row(3));
        let m = mean_pool(&tape, &b, out.nodes).unwrap();
        assert_eq!(m.shape(), vec![1, 8]);
        let bare = b.without_collection();
        assert!(collection_embedding(&bare, out.nodes).is_err());
    }
}
