//! SMILES subset parser.
//!
//! Supported: organic-subset atoms (`B C N O P S F Cl Br I` and aromatic
//! `b c n o p s`), bracket atoms with element, H count and charge, bond
//! symbols `- = # :`, branches, ring closures (`1`-`9`, `%nn`), and `.`
//! between disconnected components. Stereo marks, isotopes, atom maps and
//! wildcards are rejected.

use std::collections::BTreeMap;

use super::valence::{check_valence, implicit_hydrogens};
use super::{AtomRecord, BondOrder, BondRecord, ChemError, Element, MolGraph};

struct Builder {
    atoms: Vec<AtomRecord>,
    bonds: Vec<(usize, usize, BondOrder)>,
}

impl Builder {
    fn connect(&mut self, a: usize, b: usize, explicit: Option<BondOrder>, pos: usize) -> Result<(), ChemError> {
        if a == b {
            return Err(syntax(pos, "ring closure bonds an atom to itself"));
        }
        if self.bonds.iter().any(|&(x, y, _)| (x, y) == (a, b) || (x, y) == (b, a)) {
            return Err(syntax(pos, "duplicate bond between the same atom pair"));
        }
        let order = explicit.unwrap_or(if self.atoms[a].aromatic && self.atoms[b].aromatic {
            BondOrder::Aromatic
        } else {
            BondOrder::Single
        });
        self.bonds.push((a, b, order));
        Ok(())
    }
}

fn syntax(pos: usize, msg: &str) -> ChemError {
    ChemError::Syntax {
        pos,
        msg: msg.to_string(),
    }
}

fn bond_symbol(c: u8) -> Option<BondOrder> {
    match c {
        b'-' => Some(BondOrder::Single),
        b'=' => Some(BondOrder::Double),
        b'#' => Some(BondOrder::Triple),
        b':' => Some(BondOrder::Aromatic),
        _ => None,
    }
}

fn aromatic_element(c: u8) -> Option<Element> {
    match c {
        b'b' => Some(Element::B),
        b'c' => Some(Element::C),
        b'n' => Some(Element::N),
        b'o' => Some(Element::O),
        b'p' => Some(Element::P),
        b's' => Some(Element::S),
        _ => None,
    }
}

/// Parses `text` into a [`MolGraph`]. With `check_valence` set, over-valent
/// atoms are rejected with [`ChemError::Valence`].
pub fn parse_smiles(text: &str, check_valence_flag: bool) -> Result<MolGraph, ChemError> {
    if text.is_empty() {
        return Err(syntax(0, "empty SMILES"));
    }
    if !text.is_ascii() {
        return Err(syntax(0, "SMILES must be ASCII"));
    }
    let s = text.as_bytes();
    let mut b = Builder {
        atoms: Vec::new(),
        bonds: Vec::new(),
    };
    let mut prev: Option<usize> = None;
    let mut pending: Option<(BondOrder, usize)> = None;
    let mut branches: Vec<(usize, usize)> = Vec::new();
    let mut rings: BTreeMap<u32, (usize, Option<BondOrder>, usize)> = BTreeMap::new();
    let mut after_dot = false;
    let mut i = 0;

    while i < s.len() {
        let c = s[i];
        let start = i;
        match c {
            b'(' => {
                let Some(p) = prev else {
                    return Err(syntax(i, "branch opened before any atom"));
                };
                if pending.is_some() {
                    return Err(syntax(i, "bond symbol before '('"));
                }
                branches.push((p, i));
                i += 1;
                if s.get(i) == Some(&b')') {
                    return Err(syntax(i, "empty branch"));
                }
            }
            b')' => {
                if pending.is_some() {
                    return Err(syntax(i, "bond symbol before ')'"));
                }
                let Some((p, _)) = branches.pop() else {
                    return Err(syntax(i, "unbalanced ')'"));
                };
                prev = Some(p);
                i += 1;
            }
            b'.' => {
                if prev.is_none() || pending.is_some() || !branches.is_empty() {
                    return Err(syntax(i, "misplaced '.'"));
                }
                prev = None;
                after_dot = true;
                i += 1;
            }
            _ if bond_symbol(c).is_some() => {
                if prev.is_none() {
                    return Err(syntax(i, "bond symbol without a preceding atom"));
                }
                if pending.is_some() {
                    return Err(syntax(i, "two consecutive bond symbols"));
                }
                pending = Some((bond_symbol(c).unwrap(), i));
                i += 1;
            }
            b'0'..=b'9' | b'%' => {
                let Some(p) = prev else {
                    return Err(syntax(i, "ring closure without a preceding atom"));
                };
                let label = if c == b'%' {
                    let digits = s.get(i + 1..i + 3).filter(|d| d.iter().all(u8::is_ascii_digit));
                    let Some(d) = digits else {
                        return Err(syntax(i, "'%' needs two digits"));
                    };
                    i += 3;
                    u32::from(d[0] - b'0') * 10 + u32::from(d[1] - b'0')
                } else {
                    i += 1;
                    u32::from(c - b'0')
                };
                let bond = pending.take().map(|(o, _)| o);
                match rings.remove(&label) {
                    Some((other, open_bond, _)) => {
                        let order = match (open_bond, bond) {
                            (Some(x), Some(y)) if x != y => {
                                return Err(syntax(start, "conflicting ring closure bond orders"))
                            }
                            (x, y) => x.or(y),
                        };
                        b.connect(other, p, order, start)?;
                    }
                    None => {
                        rings.insert(label, (p, bond, start));
                    }
                }
            }
            b'[' => {
                let (atom, next) = parse_bracket(s, i)?;
                i = next;
                add_atom(&mut b, atom, &mut prev, &mut pending, start)?;
                after_dot = false;
            }
            b'/' | b'\\' | b'@' => return Err(syntax(i, "stereochemistry is not supported")),
            b'*' => return Err(syntax(i, "wildcard atoms are not supported")),
            _ => {
                let (element, aromatic, width) = organic_atom(s, i)?;
                i += width;
                let mut atom = AtomRecord::new(element);
                atom.aromatic = aromatic;
                add_atom(&mut b, atom, &mut prev, &mut pending, start)?;
                after_dot = false;
            }
        }
    }

    if let Some(&(_, pos)) = branches.last() {
        return Err(syntax(pos, "unbalanced '('"));
    }
    if let Some((_, &(_, _, pos))) = rings.iter().next() {
        return Err(syntax(pos, "dangling ring closure"));
    }
    if let Some((_, pos)) = pending {
        return Err(syntax(pos, "dangling bond symbol"));
    }
    if after_dot {
        return Err(syntax(s.len(), "trailing '.'"));
    }

    let bonds: Vec<BondRecord> = b
        .bonds
        .iter()
        .map(|&(a, c, order)| BondRecord {
            a,
            b: c,
            order,
            in_ring: false,
        })
        .collect();
    let mut graph = MolGraph::from_parts(b.atoms, bonds, text.to_string())?;
    mark_ring_bonds(&mut graph);
    for i in 0..graph.n_atoms() {
        graph.atoms[i].degree = graph.adjacency[i].len().min(u8::MAX as usize) as u8;
        if !graph.atoms[i].bracket {
            graph.atoms[i].implicit_h = implicit_hydrogens(&graph, i);
        }
    }
    if check_valence_flag {
        check_valence(&graph)?;
    }
    Ok(graph)
}

fn add_atom(
    b: &mut Builder,
    atom: AtomRecord,
    prev: &mut Option<usize>,
    pending: &mut Option<(BondOrder, usize)>,
    pos: usize,
) -> Result<(), ChemError> {
    let idx = b.atoms.len();
    b.atoms.push(atom);
    match (*prev, pending.take()) {
        (Some(p), bond) => b.connect(p, idx, bond.map(|(o, _)| o), pos)?,
        (None, Some((_, bpos))) => return Err(syntax(bpos, "bond symbol without a preceding atom")),
        (None, None) => {}
    }
    *prev = Some(idx);
    Ok(())
}

fn organic_atom(s: &[u8], i: usize) -> Result<(Element, bool, usize), ChemError> {
    let c = s[i];
    let next = s.get(i + 1).copied();
    let found = match c {
        b'C' if next == Some(b'l') => Some((Element::Cl, false, 2)),
        b'B' if next == Some(b'r') => Some((Element::Br, false, 2)),
        b'B' => Some((Element::B, false, 1)),
        b'C' => Some((Element::C, false, 1)),
        b'N' => Some((Element::N, false, 1)),
        b'O' => Some((Element::O, false, 1)),
        b'P' => Some((Element::P, false, 1)),
        b'S' => Some((Element::S, false, 1)),
        b'F' => Some((Element::F, false, 1)),
        b'I' => Some((Element::I, false, 1)),
        _ => aromatic_element(c).map(|e| (e, true, 1)),
    };
    found.ok_or_else(|| syntax(i, &format!("unknown symbol '{}'", c as char)))
}

/// Parses `[...]` starting at `open`; returns the atom and the index after `]`.
fn parse_bracket(s: &[u8], open: usize) -> Result<(AtomRecord, usize), ChemError> {
    let malformed = |pos: usize, msg: &str| syntax(pos, &format!("malformed bracket atom: {msg}"));
    let mut i = open + 1;
    match s.get(i) {
        None => return Err(malformed(i, "unterminated")),
        Some(c) if c.is_ascii_digit() => return Err(syntax(i, "isotopes are not supported")),
        Some(b'*') => return Err(syntax(i, "wildcard atoms are not supported")),
        _ => {}
    }
    let (element, aromatic) = match s.get(i).copied() {
        Some(u) if u.is_ascii_uppercase() => {
            let two = s.get(i + 1).filter(|l| l.is_ascii_lowercase()).map(|&l| [u, l]);
            let sym2 = two.and_then(|t| Element::from_symbol(std::str::from_utf8(&t).ok()?));
            if let Some(e) = sym2 {
                i += 2;
                (e, false)
            } else if let Some(e) = Element::from_symbol(std::str::from_utf8(&[u]).unwrap()) {
                i += 1;
                (e, false)
            } else {
                return Err(malformed(i, "unsupported element"));
            }
        }
        Some(l) => match aromatic_element(l) {
            Some(e) => {
                i += 1;
                (e, true)
            }
            None => return Err(malformed(i, "unsupported element")),
        },
        None => return Err(malformed(i, "unterminated")),
    };
    let mut atom = AtomRecord::new(element);
    atom.aromatic = aromatic;
    atom.bracket = true;

    if s.get(i) == Some(&b'@') {
        return Err(syntax(i, "stereochemistry is not supported"));
    }
    if s.get(i) == Some(&b'H') {
        i += 1;
        let mut count = 1u8;
        if let Some(d) = s.get(i).filter(|d| d.is_ascii_digit()) {
            count = d - b'0';
            i += 1;
        }
        atom.explicit_h = count;
    }
    if let Some(&sign) = s.get(i).filter(|c| **c == b'+' || **c == b'-') {
        let unit: i32 = if sign == b'+' { 1 } else { -1 };
        i += 1;
        let mut magnitude = 1i32;
        if let Some(d) = s.get(i).filter(|d| d.is_ascii_digit()) {
            magnitude = i32::from(d - b'0');
            i += 1;
        } else {
            while s.get(i) == Some(&sign) {
                magnitude += 1;
                i += 1;
            }
        }
        let charge = unit * magnitude;
        if !(-2..=2).contains(&charge) {
            return Err(malformed(i, "formal charge outside [-2, +2]"));
        }
        atom.formal_charge = charge as i8;
    }
    match s.get(i) {
        Some(b']') => Ok((atom, i + 1)),
        Some(b':') => Err(syntax(i, "atom maps are not supported")),
        Some(_) => Err(malformed(i, "unexpected character")),
        None => Err(malformed(i, "unterminated")),
    }
}

/// Marks every bond that lies on a cycle (i.e. is not a bridge).
fn mark_ring_bonds(graph: &mut MolGraph) {
    let n = graph.n_atoms();
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut timer = 0;
    let mut bridges = vec![false; graph.n_bonds()];
    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        // Iterative DFS: (node, incoming bond, next adjacency slot).
        let mut stack: Vec<(usize, Option<usize>, usize)> = vec![(root, None, 0)];
        disc[root] = timer;
        low[root] = timer;
        timer += 1;
        while let Some(&mut (v, via, ref mut slot)) = stack.last_mut() {
            if let Some(&(w, bond)) = graph.adjacency[v].get(*slot) {
                *slot += 1;
                if Some(bond) == via {
                    continue;
                }
                if disc[w] == usize::MAX {
                    disc[w] = timer;
                    low[w] = timer;
                    timer += 1;
                    stack.push((w, Some(bond), 0));
                } else {
                    low[v] = low[v].min(disc[w]);
                }
            } else {
                stack.pop();
                if let (Some(bond), Some(&(parent, _, _))) = (via, stack.last()) {
                    low[parent] = low[parent].min(low[v]);
                    if low[v] > disc[parent] {
                        bridges[bond] = true;
                    }
                }
            }
        }
    }
    for (bond, is_bridge) in graph.bonds.iter_mut().zip(bridges) {
        bond.in_ring = !is_bridge;
    }
}
