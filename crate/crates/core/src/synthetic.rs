//! Seeded toy corpora with two structurally disjoint families.
//!
//! Chains are acyclic aliphatic backbones; rings are linked benzene rings.
//! Every molecule also carries a theme heteroatom repeated along its whole
//! atom order, so both halves of a decomposition share it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::tasks::{LabeledDataset, TaskKind};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Family {
    Chain,
    Ring,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Theme {
    Oxygen,
    Nitrogen,
    Sulfur,
    Chlorine,
}

impl Theme {
    pub const ALL: [Theme; 4] = [Theme::Oxygen, Theme::Nitrogen, Theme::Sulfur, Theme::Chlorine];

    /// Inline chain unit carrying the theme atom.
    fn chain_unit(self) -> &'static str {
        match self {
            Theme::Oxygen => "O",
            Theme::Nitrogen => "N",
            Theme::Sulfur => "S",
            Theme::Chlorine => "C(Cl)",
        }
    }

    /// Ring substituent carrying the theme atom.
    fn substituent(self) -> &'static str {
        match self {
            Theme::Oxygen => "OC",
            Theme::Nitrogen => "N",
            Theme::Sulfur => "SC",
            Theme::Chlorine => "Cl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ToyMolecule {
    pub smiles: String,
    pub family: Family,
    pub theme: Theme,
}

impl ToyMolecule {
    /// Family and theme as one class id in `0..8`.
    pub fn class(&self) -> usize {
        let f = match self.family {
            Family::Chain => 0,
            Family::Ring => 4,
        };
        f + Theme::ALL.iter().position(|&t| t == self.theme).unwrap_or(0)
    }
}

fn chain<R: Rng>(theme: Theme, rng: &mut R) -> String {
    let mut s = format!("C{}", theme.chain_unit());
    for _ in 0..rng.gen_range(3..=5) {
        for _ in 0..rng.gen_range(1..=2) {
            s.push_str(if rng.gen_bool(0.25) { "C(C)" } else { "C" });
        }
        s.push_str(theme.chain_unit());
    }
    s.push_str("CC");
    s
}

fn ring<R: Rng>(theme: Theme, rng: &mut R) -> String {
    let mut s = String::new();
    let n_rings = rng.gen_range(2..=3);
    for i in 0..n_rings {
        if i > 0 {
            s.push_str(["", "C"].choose(rng).copied().unwrap_or(""));
        }
        let sub = theme.substituent();
        // Substituent at the para or meta position, closing on the attachment atom.
        if rng.gen_bool(0.5) {
            s.push_str(&format!("c1ccc({sub})cc1"));
        } else {
            s.push_str(&format!("c1cc({sub})ccc1"));
        }
    }
    s
}

/// `n` molecules, families alternating, themes uniform, fully determined by
/// `seed`.
pub fn toy_corpus(n: usize, seed: u64) -> Vec<ToyMolecule> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let family = if i % 2 == 0 { Family::Chain } else { Family::Ring };
            let theme = *Theme::ALL.choose(&mut rng).unwrap_or(&Theme::Oxygen);
            let smiles = match family {
                Family::Chain => chain(theme, &mut rng),
                Family::Ring => ring(theme, &mut rng),
            };
            ToyMolecule { smiles, family, theme }
        })
        .collect()
}

/// Pair classification over `toy_corpus(n_molecules, seed)`: label 1 when
/// both molecules share family and theme. Labels are drawn 50/50 and the
/// pair draws use a separate stream of the same seed.
pub fn pair_task(n_molecules: usize, n_pairs: usize, seed: u64) -> Result<LabeledDataset> {
    let mols = toy_corpus(n_molecules, seed);
    let mut classes = [0usize; 8];
    mols.iter().for_each(|m| classes[m.class()] += 1);
    if classes.iter().filter(|&&c| c > 0).count() < 2 || classes.iter().all(|&c| c < 2) {
        return Err(Error::Dataset(
            "pair task needs two classes and one repeated class".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut records = Vec::with_capacity(n_pairs);
    while records.len() < n_pairs {
        let i = rng.gen_range(0..mols.len());
        let same = rng.gen_bool(0.5);
        let wanted = |j: usize| j != i && (mols[j].class() == mols[i].class()) == same;
        if !(0..mols.len()).any(wanted) {
            continue;
        }
        let j = loop {
            let j = rng.gen_range(0..mols.len());
            if wanted(j) {
                break j;
            }
        };
        let label = f64::from(u8::from(same));
        records.push((mols[i].smiles.clone(), Some(mols[j].smiles.clone()), vec![Some(label)]));
    }
    LabeledDataset::from_records(vec!["same_class".into()], records, Some(TaskKind::Binary))
}
