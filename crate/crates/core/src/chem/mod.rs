//! Molecular graphs: SMILES parsing, valence rules, and feature indexing.

mod features;
mod graph;
mod parser;
mod valence;

pub use features::{featurize, AtomField, FeatureVocab, Featurized, FieldSpec};
pub use graph::{permute_atom_records, shuffle_atom_features, AtomRecord, BondOrder, BondRecord, Element, MolGraph};
pub use parser::parse_smiles;
pub use valence::{allowed_valences, check_valence};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ChemError {
    #[error("SMILES syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("valence error: atom {atom} ({element}) has valence {valence}, allowed at most {max}")]
    Valence {
        atom: usize,
        element: &'static str,
        valence: u32,
        max: u32,
    },
    #[error("vocab error: field {field} value {value} outside cardinality {cardinality}")]
    Vocab {
        field: &'static str,
        value: usize,
        cardinality: usize,
    },
    #[error("invalid molecular graph: {0}")]
    Structure(String),
}
