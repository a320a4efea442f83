//! Deliberately literal reference implementations: one node, one head, one
//! coordinate at a time, on nested `Vec`s. Nothing here shares code with the
//! vectorized engine beyond reading its data structures.

use mpg_core::molgnet::{ArcKind, BatchedGraph, GruBlend, LayerParams, MolGNetConfig, MolGNetParams, Segment};
use mpg_core::numcore::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    t.to_rows()
}

/// `w x` for `w` stored `out x in`.
pub fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    assert_eq!(inp, x.len());
    let mut y = vec![0.0; out];
    for (r, yr) in y.iter_mut().enumerate() {
        for (c, xc) in x.iter().enumerate() {
            *yr += w.data()[r * inp + c] * xc;
        }
    }
    y
}

pub fn vadd(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn affine(w: &Tensor, x: &[f64], b: &Tensor) -> Vec<f64> {
    vadd(&matvec(w, x), b.data())
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn gelu(z: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * z * (1.0 + (c * (z + 0.044715 * z * z * z)).tanh())
}

pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| gamma[i] * (v - mean) / denom + beta[i])
        .collect()
}

/// Input node rows and per-arc edge rows, summed table row by table row.
pub fn embed(batch: &BatchedGraph, p: &MolGNetParams) -> (Mat, Mat) {
    let d = p.embed.atom.shape()[1];
    let mut x = Vec::new();
    for (i, feats) in batch.node_features.iter().enumerate() {
        let mut row = p.embed.segment.row(batch.node_segment[i].index()).to_vec();
        for &f in feats {
            for c in 0..d {
                row[c] += p.embed.atom.get2(f, c);
            }
        }
        x.push(row);
    }
    let mut e = Vec::new();
    for arc in &batch.arcs {
        let row = match &arc.kind {
            ArcKind::Bond { features, segment } => {
                let mut row = p.embed.segment.row(segment.index()).to_vec();
                for &f in features {
                    for c in 0..d {
                        row[c] += p.embed.bond.get2(f, c);
                    }
                }
                row
            }
            ArcKind::Virtual => vadd(
                p.embed.virtual_edge.row(0),
                p.embed.segment.row(Segment::Collect.index()),
            ),
        };
        e.push(row);
    }
    (x, e)
}

/// Messages per node and attention per arc and head.
pub fn attention(x: &Mat, e: &Mat, batch: &BatchedGraph, l: &LayerParams, heads: usize) -> (Mat, Mat) {
    let n = x.len();
    let d = x[0].len();
    let dk = d / heads;
    let mut attn = vec![vec![0.0; heads]; batch.arcs.len()];
    let mut messages = Vec::with_capacity(n);
    for i in 0..n {
        let q = matvec(&l.wq, &x[i]);
        let incoming: Vec<usize> = (0..batch.arcs.len()).filter(|&a| batch.arcs[a].target == i).collect();
        let mut concat = vec![0.0; d];
        for k in 0..heads {
            let mut scores = Vec::new();
            let mut values = Vec::new();
            for &a in &incoming {
                let j = batch.arcs[a].source;
                let info = vadd(&x[j], &e[a]);
                let key = matvec(&l.wk, &info);
                let value = matvec(&l.wv, &info);
                let mut s = 0.0;
                for c in k * dk..(k + 1) * dk {
                    s += q[c] * key[c];
                }
                scores.push(s / (dk as f64).sqrt());
                values.push(value);
            }
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - top).exp()).sum();
            for (idx, &a) in incoming.iter().enumerate() {
                let w = (scores[idx] - top).exp() / z;
                attn[a][k] = w;
                for c in k * dk..(k + 1) * dk {
                    concat[c] += w * values[idx][c];
                }
            }
        }
        messages.push(matvec(&l.wm, &concat));
    }
    (messages, attn)
}

/// One full step; returns the new node states and the attention.
pub fn step(x: &Mat, h: &Mat, e: &Mat, batch: &BatchedGraph, l: &LayerParams, cfg: &MolGNetConfig) -> (Mat, Mat) {
    let (msg, attn) = attention(x, e, batch, l, cfg.heads);
    let eps = cfg.layer_norm_eps;
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let u1 = layer_norm(&vadd(&x[i], &msg[i]), l.norm1_gamma.data(), l.norm1_beta.data(), eps);
        let hidden: Vec<f64> = affine(&l.w1, &u1, &l.b1).into_iter().map(gelu).collect();
        let ff = affine(&l.w2, &hidden, &l.b2);
        let m = layer_norm(&vadd(&u1, &ff), l.norm2_gamma.data(), l.norm2_beta.data(), eps);

        let hi = &h[i];
        let r: Vec<f64> = vadd(&affine(&l.w_mr, &m, &l.b_mr), &affine(&l.w_xr, hi, &l.b_hr))
            .into_iter()
            .map(sigmoid)
            .collect();
        let u: Vec<f64> = vadd(&affine(&l.w_mu, &m, &l.b_mu), &affine(&l.w_xu, hi, &l.b_hu))
            .into_iter()
            .map(sigmoid)
            .collect();
        let hn = affine(&l.w_hn, hi, &l.b_hn);
        let pre = affine(&l.w_in, &m, &l.b_in);
        let carry = match cfg.gru_blend {
            GruBlend::NodeState => &x[i],
            GruBlend::Hidden => hi,
        };
        let next: Vec<f64> = (0..pre.len())
            .map(|c| {
                let cand = (pre[c] + r[c] * hn[c]).tanh();
                (1.0 - u[c]) * carry[c] + u[c] * cand
            })
            .collect();
        out.push(next);
    }
    (out, attn)
}

/// Final node states and `attention[layer][step]`.
pub fn forward(batch: &BatchedGraph, p: &MolGNetParams, cfg: &MolGNetConfig) -> (Mat, Vec<Vec<Mat>>) {
    let (mut x, e) = embed(batch, p);
    let mut all = Vec::new();
    for l in &p.layers {
        let mut h = x.clone();
        let mut steps = Vec::new();
        for _ in 0..cfg.steps_per_layer {
            let (next, attn) = step(&x, &h, &e, batch, l, cfg);
            x = next.clone();
            h = next;
            steps.push(attn);
        }
        all.push(steps);
    }
    (x, all)
}

/// Largest absolute difference between a tensor and a nested matrix.
pub fn max_diff(t: &Tensor, m: &Mat) -> f64 {
    let rows = t.to_rows();
    assert_eq!(rows.len(), m.len());
    rows.iter()
        .zip(m)
        .flat_map(|(a, b)| {
            assert_eq!(a.len(), b.len());
            a.iter().zip(b).map(|(x, y)| (x - y).abs())
        })
        .fold(0.0, f64::max)
}

/// Fraction of positive-negative pairs ranked correctly, ties counted half.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut hits, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    hits += 1.0;
                } else if scores[i] == scores[j] {
                    hits += 0.5;
                }
            }
        }
    }
    hits / pairs
}

/// Random molecule-like graph with `n` atoms: a random spanning tree plus up
/// to `extra` chords, random bond orders and atom attributes inside the
/// default vocabulary. No chemical validity is implied.
pub fn random_graph<R: rand::Rng>(rng: &mut R, n: usize, extra: usize) -> mpg_core::chem::MolGraph {
    use mpg_core::chem::{AtomRecord, BondOrder, BondRecord, Element, MolGraph};
    const ORDERS: [BondOrder; 4] = [
        BondOrder::Single,
        BondOrder::Double,
        BondOrder::Triple,
        BondOrder::Aromatic,
    ];
    let mut bonds: Vec<BondRecord> = Vec::new();
    let linked = |a: usize, b: usize, bonds: &mut Vec<BondRecord>, rng: &mut R| {
        if a != b && !bonds.iter().any(|x| (x.a, x.b) == (a, b) || (x.a, x.b) == (b, a)) {
            bonds.push(BondRecord {
                a,
                b,
                order: ORDERS[rng.gen_range(0..4)],
                in_ring: rng.gen_bool(0.3),
            });
        }
    };
    for i in 1..n {
        let j = rng.gen_range(0..i);
        linked(j, i, &mut bonds, rng);
    }
    for _ in 0..extra {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        linked(a, b, &mut bonds, rng);
    }
    let mut degree = vec![0u8; n];
    for b in &bonds {
        degree[b.a] += 1;
        degree[b.b] += 1;
    }
    let atoms = (0..n)
        .map(|i| {
            let mut a = AtomRecord::new(Element::ALL[rng.gen_range(0..Element::CHEMICAL)]);
            a.formal_charge = rng.gen_range(-2..=2);
            a.implicit_h = rng.gen_range(0..4);
            a.aromatic = rng.gen_bool(0.3);
            a.degree = degree[i];
            a
        })
        .collect();
    MolGraph::from_parts(atoms, bonds, format!("random{n}")).expect("generated graph is well formed")
}

/// Atom in a generated molecule: its SMILES token, bonding capacity and
/// whether it is aromatic.
struct GenAtom {
    token: String,
    capacity: u32,
    aromatic: bool,
}

const ALIPHATIC: [(&str, u32); 14] = [
    ("C", 4),
    ("C", 4),
    ("C", 4),
    ("N", 3),
    ("O", 2),
    ("S", 2),
    ("P", 3),
    ("B", 3),
    ("F", 1),
    ("Cl", 1),
    ("Br", 1),
    ("I", 1),
    ("[NH+]", 3),
    ("[O-]", 1),
];

/// Random SMILES inside the supported grammar that obeys the valence table:
/// branches, explicit bond symbols, single- and two-digit ring closures,
/// bracket atoms, benzene rings and occasional `.` components.
pub fn grammar_smiles<R: rand::Rng>(rng: &mut R, max_atoms: usize) -> String {
    let mut parts = vec![grammar_component(rng, max_atoms)];
    if rng.gen_bool(0.1) {
        parts.push(grammar_component(rng, 4));
    }
    parts.join(".")
}

fn grammar_component<R: rand::Rng>(rng: &mut R, max_atoms: usize) -> String {
    let mut atoms: Vec<GenAtom> = Vec::new();
    let mut edges: Vec<(usize, usize, u32, bool)> = Vec::new();
    let target = rng.gen_range(1..=max_atoms.max(1));
    let add_ring = |atoms: &mut Vec<GenAtom>, edges: &mut Vec<(usize, usize, u32, bool)>| {
        let base = atoms.len();
        for k in 0..6 {
            atoms.push(GenAtom {
                token: "c".into(),
                capacity: 1,
                aromatic: true,
            });
            if k > 0 {
                edges.push((base + k - 1, base + k, 0, true));
            }
        }
        edges.push((base + 5, base, 0, true));
        base
    };
    if rng.gen_bool(0.2) {
        add_ring(&mut atoms, &mut edges);
    } else {
        let (t, c) = ALIPHATIC[rng.gen_range(0..3)];
        atoms.push(GenAtom {
            token: t.into(),
            capacity: c,
            aromatic: false,
        });
    }
    while atoms.len() < target {
        let open: Vec<usize> = (0..atoms.len()).filter(|&i| atoms[i].capacity > 0).collect();
        let Some(&parent) = open.get(rng.gen_range(0..open.len().max(1))) else {
            break;
        };
        let child = if rng.gen_bool(0.08) {
            add_ring(&mut atoms, &mut edges)
        } else {
            let (t, c) = ALIPHATIC[rng.gen_range(0..ALIPHATIC.len())];
            atoms.push(GenAtom {
                token: t.into(),
                capacity: c,
                aromatic: false,
            });
            atoms.len() - 1
        };
        let max_order = atoms[parent].capacity.min(atoms[child].capacity).min(3);
        let order = if max_order > 1 && rng.gen_bool(0.25) {
            rng.gen_range(2..=max_order)
        } else {
            1
        };
        atoms[parent].capacity -= order;
        atoms[child].capacity -= order;
        edges.push((parent, child, order, false));
    }
    // Chords become ring closures.
    for _ in 0..rng.gen_range(0..3) {
        let open: Vec<usize> = (0..atoms.len())
            .filter(|&i| atoms[i].capacity > 0 && !atoms[i].aromatic)
            .collect();
        if open.len() < 2 {
            break;
        }
        let a = open[rng.gen_range(0..open.len())];
        let b = open[rng.gen_range(0..open.len())];
        if a == b || edges.iter().any(|&(x, y, _, _)| (x, y) == (a, b) || (x, y) == (b, a)) {
            continue;
        }
        atoms[a].capacity -= 1;
        atoms[b].capacity -= 1;
        edges.push((a, b, 1, false));
    }
    write_smiles(&atoms, &edges, rng)
}

fn bond_token(order: u32, aromatic_edge: bool, both_aromatic: bool, rng: &mut impl rand::Rng) -> &'static str {
    match (order, aromatic_edge) {
        (_, true) => {
            if rng.gen_bool(0.1) {
                ":"
            } else {
                ""
            }
        }
        (1, _) if both_aromatic => "-",
        (1, _) => {
            if rng.gen_bool(0.1) {
                "-"
            } else {
                ""
            }
        }
        (2, _) => "=",
        _ => "#",
    }
}

/// Depth-first writer: tree edges become chains and branches, the rest ring
/// closures with labels from `1..=9` or `%10..=%99`.
fn write_smiles<R: rand::Rng>(atoms: &[GenAtom], edges: &[(usize, usize, u32, bool)], rng: &mut R) -> String {
    let n = atoms.len();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (k, &(a, b, _, _)) in edges.iter().enumerate() {
        adj[a].push(k);
        adj[b].push(k);
    }
    let mut tree = vec![false; edges.len()];
    let mut seen = vec![false; n];
    let mut children: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    seen[0] = true;
    fn dfs(
        u: usize,
        adj: &[Vec<usize>],
        edges: &[(usize, usize, u32, bool)],
        seen: &mut [bool],
        tree: &mut [bool],
        children: &mut [Vec<(usize, usize)>],
    ) {
        for &k in &adj[u] {
            let (a, b, _, _) = edges[k];
            let v = if a == u { b } else { a };
            if !seen[v] {
                seen[v] = true;
                tree[k] = true;
                children[u].push((v, k));
                dfs(v, adj, edges, seen, tree, children);
            }
        }
    }
    dfs(0, &adj, edges, &mut seen, &mut tree, &mut children);
    let mut labels: Vec<Option<u32>> = vec![None; edges.len()];
    let mut in_use: Vec<u32> = Vec::new();
    let mut out = String::new();
    fn emit<R: rand::Rng>(
        u: usize,
        atoms: &[GenAtom],
        edges: &[(usize, usize, u32, bool)],
        adj: &[Vec<usize>],
        tree: &[bool],
        children: &[Vec<(usize, usize)>],
        labels: &mut [Option<u32>],
        in_use: &mut Vec<u32>,
        out: &mut String,
        rng: &mut R,
    ) {
        out.push_str(&atoms[u].token);
        for &k in &adj[u] {
            if tree[k] {
                continue;
            }
            let (a, b, ord, arom) = edges[k];
            let both = atoms[a].aromatic && atoms[b].aromatic;
            let label = match labels[k] {
                Some(l) => {
                    in_use.retain(|&x| x != l);
                    l
                }
                None => {
                    let l = loop {
                        let l = if rng.gen_bool(0.2) {
                            rng.gen_range(10..=99)
                        } else {
                            rng.gen_range(1..=9)
                        };
                        if !in_use.contains(&l) {
                            break l;
                        }
                    };
                    in_use.push(l);
                    labels[k] = Some(l);
                    out.push_str(bond_token(ord, arom, both, rng));
                    if l >= 10 {
                        out.push_str(&format!("%{l}"));
                    } else {
                        out.push_str(&l.to_string());
                    }
                    continue;
                }
            };
            if label >= 10 {
                out.push_str(&format!("%{label}"));
            } else {
                out.push_str(&label.to_string());
            }
        }
        let kids = &children[u];
        for (idx, &(v, k)) in kids.iter().enumerate() {
            let (a, b, ord, arom) = edges[k];
            let both = atoms[a].aromatic && atoms[b].aromatic;
            let last = idx + 1 == kids.len();
            if !last {
                out.push('(');
            }
            out.push_str(bond_token(ord, arom, both, rng));
            emit(v, atoms, edges, adj, tree, children, labels, in_use, out, rng);
            if !last {
                out.push(')');
            }
        }
    }
    emit(
        0,
        atoms,
        edges,
        &adj,
        &tree,
        &children,
        &mut labels,
        &mut in_use,
        &mut out,
        rng,
    );
    out
}

/// Injects one grammar violation into a valid SMILES string.
pub fn mutate_invalid<R: rand::Rng>(rng: &mut R, valid: &str) -> String {
    let pos = rng.gen_range(0..=valid.len());
    let (head, tail) = valid.split_at(pos);
    match rng.gen_range(0..7) {
        0 => format!("{valid}("),
        1 => {
            // A ')' wherever no branch is open.
            let mut depth = 0i32;
            let mut spots = vec![0];
            for (i, c) in valid.char_indices() {
                depth += match c {
                    '(' => 1,
                    ')' => -1,
                    _ => 0,
                };
                if depth == 0 {
                    spots.push(i + 1);
                }
            }
            let at = spots[rng.gen_range(0..spots.len())];
            format!("{}){}", &valid[..at], &valid[at..])
        }
        2 => format!("{valid}C{}", ["7", "%42", "%13"][rng.gen_range(0..3)]),
        3 => format!(
            "{head}{}{tail}",
            ["X", "Q", "*", "$", "?", "@", "/", "\\", "&"][rng.gen_range(0..9)]
        ),
        4 => format!("{valid}[C"),
        5 => format!("[13C]{valid}"),
        _ => format!("[C@H]{valid}"),
    }
}

/// Hand-built molecules with at least one over-valent atom.
pub const OVER_VALENCE: [&str; 50] = [
    "C(C)(C)(C)(C)C",
    "C(C)(C)(C)(C)(C)C",
    "N(C)(C)(C)C",
    "N(C)(C)(C)(C)C",
    "O(C)(C)C",
    "O(C)(C)(C)C",
    "B(C)(C)(C)C",
    "B(C)(C)(C)(C)C",
    "F(C)C",
    "F(C)(C)C",
    "Cl(C)C",
    "Cl(C)(C)C",
    "Br(C)C",
    "Br(C)(C)C",
    "I(C)C",
    "I(C)(C)C",
    "P(C)(C)(C)(C)(C)C",
    "P(C)(C)(C)(C)(C)(C)C",
    "S(C)(C)(C)(C)(C)(C)C",
    "C=C(C)(C)C",
    "C#C(C)C",
    "C=C(=C)C",
    "O=C(=O)=O",
    "N#N=C",
    "O=O=O",
    "C#O",
    "N(=O)=O",
    "C=N(C)C",
    "N#C#N",
    "C=F",
    "Cl=C",
    "Br#C",
    "I=O",
    "C=B(C)C",
    "C#B=C",
    "S(=O)(=O)(=O)=O",
    "P(=O)(=O)(C)C",
    "[N+](C)(C)(C)(C)C",
    "[O-](C)C",
    "[C-](C)(C)(C)C",
    "[C+](C)(C)(C)C",
    "[B-](C)(C)(C)(C)C",
    "[Cl-]C",
    "[O+](C)(C)(C)C",
    "[NH4+]C",
    "[CH4]C",
    "[OH2]C",
    "[NH3]C",
    "c1cc(C)(C)(C)ccc1",
    "o1(C)cccc1",
];
