use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::ChemError;

/// Supported node symbols. `Mask` and `Collect` are reserved and never
/// produced by the parser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Element {
    B,
    C,
    N,
    O,
    P,
    S,
    F,
    Cl,
    Br,
    I,
    H,
    Mask,
    Collect,
}

impl Element {
    pub const ALL: [Element; 13] = [
        Element::B,
        Element::C,
        Element::N,
        Element::O,
        Element::P,
        Element::S,
        Element::F,
        Element::Cl,
        Element::Br,
        Element::I,
        Element::H,
        Element::Mask,
        Element::Collect,
    ];

    /// Number of chemical elements (the reserved symbols excluded).
    pub const CHEMICAL: usize = 11;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Element> {
        Self::ALL.get(i).copied()
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Element::B => "B",
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::P => "P",
            Element::S => "S",
            Element::F => "F",
            Element::Cl => "Cl",
            Element::Br => "Br",
            Element::I => "I",
            Element::H => "H",
            Element::Mask => "MASK",
            Element::Collect => "COLLECT",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Element> {
        Self::ALL[..Self::CHEMICAL].iter().copied().find(|e| e.symbol() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    pub fn index(self) -> usize {
        self as usize
    }

    /// Bond order in half units (aromatic = 3).
    pub fn half_units(self) -> u32 {
        match self {
            BondOrder::Single => 2,
            BondOrder::Double => 4,
            BondOrder::Triple => 6,
            BondOrder::Aromatic => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AtomRecord {
    pub element: Element,
    pub formal_charge: i8,
    /// Hydrogens written inside a bracket atom.
    pub explicit_h: u8,
    /// Hydrogens implied by valence for organic-subset atoms.
    pub implicit_h: u8,
    pub aromatic: bool,
    pub degree: u8,
    /// Whether the atom was written in brackets.
    pub bracket: bool,
}

impl AtomRecord {
    pub fn new(element: Element) -> Self {
        Self {
            element,
            formal_charge: 0,
            explicit_h: 0,
            implicit_h: 0,
            aromatic: false,
            degree: 0,
            bracket: false,
        }
    }

    pub fn total_h(&self) -> u32 {
        u32::from(self.explicit_h) + u32::from(self.implicit_h)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BondRecord {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
    pub in_ring: bool,
}

/// An undirected molecular graph. Bonds are stored once; `adjacency[i]`
/// lists `(neighbor, bond_index)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MolGraph {
    pub atoms: Vec<AtomRecord>,
    pub bonds: Vec<BondRecord>,
    pub adjacency: Vec<Vec<(usize, usize)>>,
    pub source: String,
}

impl MolGraph {
    /// Assembles a graph and checks its structural invariants. Atom records
    /// are taken as given (degree is not recomputed).
    pub fn from_parts(atoms: Vec<AtomRecord>, bonds: Vec<BondRecord>, source: String) -> Result<Self, ChemError> {
        if atoms.is_empty() {
            return Err(ChemError::Structure("graph has no atoms".into()));
        }
        let mut adjacency = vec![Vec::new(); atoms.len()];
        for (bi, bond) in bonds.iter().enumerate() {
            if bond.a >= atoms.len() || bond.b >= atoms.len() {
                return Err(ChemError::Structure(format!("bond {bi} endpoint out of range")));
            }
            if bond.a == bond.b {
                return Err(ChemError::Structure(format!("bond {bi} is a self-loop")));
            }
            if adjacency[bond.a].iter().any(|&(n, _)| n == bond.b) {
                return Err(ChemError::Structure(format!(
                    "duplicate bond between {} and {}",
                    bond.a, bond.b
                )));
            }
            adjacency[bond.a].push((bond.b, bi));
            adjacency[bond.b].push((bond.a, bi));
        }
        Ok(Self {
            atoms,
            bonds,
            adjacency,
            source,
        })
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn n_bonds(&self) -> usize {
        self.bonds.len()
    }

    /// True when adjacency is symmetric and every bond is well formed.
    pub fn check_invariants(&self) -> bool {
        if self.atoms.is_empty() || self.adjacency.len() != self.atoms.len() {
            return false;
        }
        for (bi, bond) in self.bonds.iter().enumerate() {
            if bond.a == bond.b || bond.a >= self.n_atoms() || bond.b >= self.n_atoms() {
                return false;
            }
            if !self.adjacency[bond.a].contains(&(bond.b, bi)) || !self.adjacency[bond.b].contains(&(bond.a, bi)) {
                return false;
            }
        }
        for (i, list) in self.adjacency.iter().enumerate() {
            for &(j, b) in list {
                if !self.adjacency[j].contains(&(i, b)) {
                    return false;
                }
            }
            let mut seen: Vec<usize> = list.iter().map(|&(j, _)| j).collect();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != list.len() {
                return false;
            }
        }
        true
    }

    /// Induced subgraph on the atom index range `[start, end)`. Bonds leaving
    /// the range are dropped; atom records are copied unchanged.
    pub fn induced_range(&self, start: usize, end: usize) -> Result<MolGraph, ChemError> {
        let atoms = self.atoms[start..end].to_vec();
        let bonds = self
            .bonds
            .iter()
            .filter(|b| (start..end).contains(&b.a) && (start..end).contains(&b.b))
            .map(|b| BondRecord {
                a: b.a - start,
                b: b.b - start,
                ..b.clone()
            })
            .collect();
        MolGraph::from_parts(atoms, bonds, format!("{}[{start}..{end})", self.source))
    }

    /// Structural relabeling: atom `i` moves to position `perm[i]`, bonds
    /// follow their atoms.
    pub fn relabeled(&self, perm: &[usize]) -> Result<MolGraph, ChemError> {
        let n = self.n_atoms();
        if perm.len() != n || !is_permutation(perm) {
            return Err(ChemError::Structure(
                "relabel needs a permutation of atom indices".into(),
            ));
        }
        let mut atoms = vec![AtomRecord::new(Element::C); n];
        for (i, atom) in self.atoms.iter().enumerate() {
            atoms[perm[i]] = atom.clone();
        }
        let bonds = self
            .bonds
            .iter()
            .map(|b| BondRecord {
                a: perm[b.a],
                b: perm[b.b],
                ..b.clone()
            })
            .collect();
        MolGraph::from_parts(atoms, bonds, self.source.clone())
    }
}

fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    perm.iter()
        .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true))
}

/// Moves the record at position `i` to position `perm[i]`; bonds stay put.
pub fn permute_atom_records(graph: &MolGraph, perm: &[usize]) -> Result<MolGraph, ChemError> {
    if perm.len() != graph.n_atoms() || !is_permutation(perm) {
        return Err(ChemError::Structure(
            "record permutation has wrong length or repeats".into(),
        ));
    }
    let mut out = graph.clone();
    for (i, atom) in graph.atoms.iter().enumerate() {
        out.atoms[perm[i]] = atom.clone();
    }
    Ok(out)
}

/// Seeded shuffle of atom records across positions, leaving bonds and
/// adjacency untouched. Produces structurally implausible molecules.
pub fn shuffle_atom_features(graph: &MolGraph, seed: u64) -> MolGraph {
    if graph.n_atoms() < 2 {
        return graph.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..graph.n_atoms()).collect();
    perm.shuffle(&mut rng);
    permute_atom_records(graph, &perm).expect("shuffled indices form a permutation")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::parse_smiles;

    #[test]
    fn swap_permutation_on_co() {
        let g = parse_smiles("CO", false).unwrap();
        let s = permute_atom_records(&g, &[1, 0]).unwrap();
        assert_eq!(s.atoms[0].element, Element::O);
        assert_eq!(s.atoms[1].element, Element::C);
        assert_eq!(s.bonds, g.bonds);
        assert_eq!(s.adjacency, g.adjacency);
    }

    #[test]
    fn identity_permutation_is_noop() {
        let g = parse_smiles("CC(=O)N", false).unwrap();
        assert_eq!(permute_atom_records(&g, &[0, 1, 2, 3]).unwrap(), g);
    }

    #[test]
    fn seeded_shuffle_is_deterministic() {
        let g = parse_smiles("CC(=O)NCCOc1ccccc1", false).unwrap();
        let a = shuffle_atom_features(&g, 42);
        let b = shuffle_atom_features(&g, 42);
        assert_eq!(a, b);
        assert_eq!(a.bonds, g.bonds);
        let mut before: Vec<_> = g.atoms.iter().map(|a| a.element.index()).collect();
        let mut after: Vec<_> = a.atoms.iter().map(|a| a.element.index()).collect();
        before.sort_unstable();
        after.sort_unstable();
        assert_eq!(before, after);
    }

    #[test]
    fn single_atom_shuffle_unchanged() {
        let g = parse_smiles("C", true).unwrap();
        assert_eq!(shuffle_atom_features(&g, 1), g);
    }

    #[test]
    fn from_parts_rejects_bad_bonds() {
        let atoms = vec![AtomRecord::new(Element::C); 2];
        let bond = |a, b| BondRecord {
            a,
            b,
            order: BondOrder::Single,
            in_ring: false,
        };
        assert!(MolGraph::from_parts(atoms.clone(), vec![bond(0, 0)], String::new()).is_err());
        assert!(MolGraph::from_parts(atoms.clone(), vec![bond(0, 2)], String::new()).is_err());
        assert!(MolGraph::from_parts(atoms.clone(), vec![bond(0, 1), bond(1, 0)], String::new()).is_err());
        assert!(MolGraph::from_parts(vec![], vec![], String::new()).is_err());
    }

    #[test]
    fn induced_range_drops_crossing_bonds() {
        let g = parse_smiles("CCOCC", false).unwrap();
        let left = g.induced_range(0, 2).unwrap();
        let right = g.induced_range(2, 5).unwrap();
        assert_eq!(left.n_bonds(), 1);
        assert_eq!(right.n_bonds(), 2);
        assert_eq!(right.atoms[0], g.atoms[2]);
        assert!(left.check_invariants() && right.check_invariants());
    }
}
