//! Organic-subset valence rules.
//!
//! Base valences: B 3, C 4, N 3, O 2, P 3/5, S 2/4/6, halogens 1, H 1. A formal
//! charge shifts them toward the isoelectronic neighbor: boron and the
//! pnictogen/chalcogen/halogen side move by `+q`, carbon and hydrogen lose
//! `|q|`.

use super::{ChemError, Element, MolGraph};

pub fn allowed_valences(element: Element, charge: i8) -> Vec<u32> {
    let q = i32::from(charge);
    let (base, shift): (&[i32], i32) = match element {
        Element::B => (&[3], -q),
        Element::C => (&[4], -q.abs()),
        Element::N => (&[3], q),
        Element::O => (&[2], q),
        Element::P => (&[3, 5], q),
        Element::S => (&[2, 4, 6], q),
        Element::F | Element::Cl | Element::Br | Element::I => (&[1], q),
        Element::H => (&[1], -q.abs()),
        Element::Mask | Element::Collect => (&[], 0),
    };
    base.iter()
        .map(|v| v + shift)
        .filter(|&v| v >= 0)
        .map(|v| v as u32)
        .collect()
}

/// Bond-order sums for atom `i` (explicit H included, implicit H excluded).
///
/// Aromatic bonds count one each; an aromatic atom may additionally carry one
/// shared pi bond, so it gets two candidates: with and without that extra unit.
pub(crate) fn valence_candidates(graph: &MolGraph, i: usize) -> Vec<u32> {
    let atom = &graph.atoms[i];
    let mut base = u32::from(atom.explicit_h);
    for &(_, b) in &graph.adjacency[i] {
        base += match graph.bonds[b].order.half_units() {
            3 => 1,
            h => h / 2,
        };
    }
    if atom.aromatic {
        vec![base + 1, base]
    } else {
        vec![base]
    }
}

/// Implicit hydrogens needed to reach the nearest allowed valence, floored at 0.
pub(crate) fn implicit_hydrogens(graph: &MolGraph, i: usize) -> u8 {
    let atom = &graph.atoms[i];
    let allowed = allowed_valences(atom.element, atom.formal_charge);
    let cands = valence_candidates(graph, i);
    if atom.aromatic && cands.iter().any(|c| allowed.contains(c)) {
        return 0;
    }
    let used = cands[0];
    allowed
        .iter()
        .copied()
        .filter(|&v| v >= used)
        .min()
        .map_or(0, |v| (v - used) as u8)
}

/// Fails on the first atom whose bond-order sum plus hydrogens exceeds its
/// largest allowed valence.
pub fn check_valence(graph: &MolGraph) -> Result<(), ChemError> {
    for i in 0..graph.n_atoms() {
        let atom = &graph.atoms[i];
        if matches!(atom.element, Element::Mask | Element::Collect) {
            continue;
        }
        let max = allowed_valences(atom.element, atom.formal_charge)
            .into_iter()
            .max()
            .unwrap_or(0);
        let best = valence_candidates(graph, i).into_iter().min().unwrap_or(0) + u32::from(atom.implicit_h);
        if best > max {
            return Err(ChemError::Valence {
                atom: i,
                element: atom.element.symbol(),
                valence: best,
                max,
            });
        }
    }
    Ok(())
}
