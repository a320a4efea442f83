use serde::{Deserialize, Serialize};

use super::{AtomRecord, BondRecord, ChemError, Element, MolGraph};

/// Atom feature fields in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AtomField {
    Element,
    Charge,
    Hydrogens,
    Aromatic,
    Degree,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub cardinality: usize,
    pub offset: usize,
}

/// Field cardinalities with prefix-sum offsets, so one embedding table per
/// side (atoms, bonds) covers every field with disjoint index ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureVocab {
    pub atom_fields: Vec<FieldSpec>,
    pub bond_fields: Vec<FieldSpec>,
}

fn with_offsets(fields: &[(&str, usize)]) -> Vec<FieldSpec> {
    let mut offset = 0;
    fields
        .iter()
        .map(|&(name, cardinality)| {
            let spec = FieldSpec {
                name: name.to_string(),
                cardinality,
                offset,
            };
            offset += cardinality;
            spec
        })
        .collect()
}

impl Default for FeatureVocab {
    fn default() -> Self {
        Self::new([Element::ALL.len(), 5, 5, 2, 6], [4, 2])
    }
}

/// Per-atom and per-bond global feature indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Featurized {
    pub atoms: Vec<Vec<usize>>,
    pub bonds: Vec<Vec<usize>>,
}

impl FeatureVocab {
    /// Atom cardinalities are (element, charge, hydrogens, aromatic, degree);
    /// bond cardinalities are (order, in_ring).
    pub fn new(atom: [usize; 5], bond: [usize; 2]) -> Self {
        Self {
            atom_fields: with_offsets(&[
                ("element", atom[0]),
                ("charge", atom[1]),
                ("hydrogens", atom[2]),
                ("aromatic", atom[3]),
                ("degree", atom[4]),
            ]),
            bond_fields: with_offsets(&[("order", bond[0]), ("in_ring", bond[1])]),
        }
    }

    pub fn atom_vocab_size(&self) -> usize {
        self.atom_fields.iter().map(|f| f.cardinality).sum()
    }

    pub fn bond_vocab_size(&self) -> usize {
        self.bond_fields.iter().map(|f| f.cardinality).sum()
    }

    pub fn n_atom_fields(&self) -> usize {
        self.atom_fields.len()
    }

    pub fn element_cardinality(&self) -> usize {
        self.atom_fields[0].cardinality
    }

    pub fn field(&self, field: AtomField) -> &FieldSpec {
        &self.atom_fields[field as usize]
    }

    fn index(spec: &FieldSpec, field: &'static str, value: usize) -> Result<usize, ChemError> {
        if value >= spec.cardinality {
            return Err(ChemError::Vocab {
                field,
                value,
                cardinality: spec.cardinality,
            });
        }
        Ok(spec.offset + value)
    }

    /// Global index of an element in the element field.
    pub fn element_index(&self, element: Element) -> Result<usize, ChemError> {
        Self::index(&self.atom_fields[0], "element", element.index())
    }

    /// Field-local element id of a global element index.
    pub fn element_of_index(&self, global: usize) -> Option<Element> {
        let spec = &self.atom_fields[0];
        (spec.offset..spec.offset + spec.cardinality)
            .contains(&global)
            .then(|| Element::from_index(global - spec.offset))
            .flatten()
    }

    /// Hydrogen count and degree are clamped to the last bucket; element,
    /// charge and aromaticity must fit their cardinality.
    pub fn atom_indices(&self, atom: &AtomRecord) -> Result<Vec<usize>, ChemError> {
        let f = &self.atom_fields;
        let charge = i64::from(atom.formal_charge) + (f[1].cardinality as i64 / 2);
        if charge < 0 {
            return Err(ChemError::Vocab {
                field: "charge",
                value: 0,
                cardinality: f[1].cardinality,
            });
        }
        let clamp = |v: usize, spec: &FieldSpec| v.min(spec.cardinality.saturating_sub(1));
        Ok(vec![
            Self::index(&f[0], "element", atom.element.index())?,
            Self::index(&f[1], "charge", charge as usize)?,
            Self::index(&f[2], "hydrogens", clamp(atom.total_h() as usize, &f[2]))?,
            Self::index(&f[3], "aromatic", usize::from(atom.aromatic))?,
            Self::index(&f[4], "degree", clamp(usize::from(atom.degree), &f[4]))?,
        ])
    }

    pub fn bond_indices(&self, bond: &BondRecord) -> Result<Vec<usize>, ChemError> {
        let f = &self.bond_fields;
        Ok(vec![
            Self::index(&f[0], "order", bond.order.index())?,
            Self::index(&f[1], "in_ring", usize::from(bond.in_ring))?,
        ])
    }

    /// Features of a reserved-symbol atom: the symbol in the element field and
    /// neutral defaults elsewhere.
    pub fn reserved_atom_indices(&self, symbol: Element) -> Result<Vec<usize>, ChemError> {
        self.atom_indices(&AtomRecord::new(symbol))
    }
}

pub fn featurize(graph: &MolGraph, vocab: &FeatureVocab) -> Result<Featurized, ChemError> {
    let atoms = graph
        .atoms
        .iter()
        .map(|a| vocab.atom_indices(a))
        .collect::<Result<_, _>>()?;
    let bonds = graph
        .bonds
        .iter()
        .map(|b| vocab.bond_indices(b))
        .collect::<Result<_, _>>()?;
    Ok(Featurized { atoms, bonds })
}
