//! Deterministic, content-keyed train/val/test splits.
//!
//! Rows are stratified by `(label, generator)`. Inside a stratum, rows sharing
//! a content hash form one unit, and units are ordered by
//! `SHA-256(seed ‖ content_hash)`; the first 80% go to train, the next 10% to
//! val and the rest to test. Renaming a file never moves it between splits.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::manifest::{DatasetManifest, Label, ManifestRow, Split};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Standard,
    CrossDataset,
    CrossModel,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Standard => "standard",
            Protocol::CrossDataset => "cross_dataset",
            Protocol::CrossModel => "cross_model",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "standard" => Ok(Protocol::Standard),
            "cross_dataset" => Ok(Protocol::CrossDataset),
            "cross_model" => Ok(Protocol::CrossModel),
            other => Err(Error::InvalidArgument(format!("unknown protocol `{other}`"))),
        }
    }
}

/// `(train, val, test)` unit counts for an 80/10/10 split of `n` units.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let val = n / 10;
    let test = n / 10;
    (n - val - test, val, test)
}

fn order_key(seed: u64, content_hash: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(content_hash.as_bytes());
    h.finalize().into()
}

/// Rewrites the `split` field of every row.
pub fn assign_splits(rows: &mut [ManifestRow], seed: u64) {
    let mut strata: BTreeMap<(Label, String), BTreeMap<[u8; 32], Vec<usize>>> = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        strata
            .entry((row.label, row.generator.clone()))
            .or_default()
            .entry(order_key(seed, &row.content_hash))
            .or_default()
            .push(i);
    }
    for units in strata.values() {
        let (n_train, n_val, _) = split_counts(units.len());
        for (rank, members) in units.values().enumerate() {
            let split = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            for &i in members {
                rows[i].split = split;
            }
        }
    }
}

/// A manifest with protocol-checked split assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitBundle {
    pub protocol: Protocol,
    pub seed: u64,
    manifest: DatasetManifest,
}

impl SplitBundle {
    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn rows(&self, split: Split) -> Vec<&ManifestRow> {
        self.manifest.rows().iter().filter(|r| r.split == split).collect()
    }

    pub fn reals(&self, split: Split) -> Vec<&ManifestRow> {
        self.manifest
            .rows()
            .iter()
            .filter(|r| r.split == split && r.label == Label::Real)
            .collect()
    }

    pub fn fakes(&self, generator: &str, split: Split) -> Vec<&ManifestRow> {
        self.manifest
            .rows()
            .iter()
            .filter(|r| r.split == split && r.label == Label::Fake && r.generator == generator)
            .collect()
    }

    pub fn generators(&self) -> Vec<String> {
        self.manifest.generators()
    }

    /// Shared reals plus one generator's fakes for the given split.
    pub fn generator_rows(&self, generator: &str, split: Split) -> Vec<&ManifestRow> {
        let mut rows = self.reals(split);
        rows.extend(self.fakes(generator, split));
        rows
    }
}

/// Assigns splits with `seed` and checks the protocol's minimum contents.
pub fn split_manifest(manifest: &DatasetManifest, protocol: Protocol, seed: u64) -> Result<SplitBundle> {
    let mut rows = manifest.rows().to_vec();
    assign_splits(&mut rows, seed);
    let bundle = SplitBundle {
        protocol,
        seed,
        manifest: DatasetManifest::new(rows)?,
    };
    let count = |label: Label, split: Split| {
        bundle
            .manifest
            .rows()
            .iter()
            .filter(|r| r.label == label && r.split == split)
            .count()
    };
    match protocol {
        Protocol::Standard | Protocol::CrossDataset => {
            if count(Label::Real, Split::Train) == 0 || count(Label::Fake, Split::Train) == 0 {
                return Err(Error::InsufficientRows(
                    "training split needs at least one real and one fake row".into(),
                ));
            }
            if bundle.rows(Split::Test).is_empty() {
                return Err(Error::InsufficientRows("test split is empty".into()));
            }
        }
        Protocol::CrossModel => {
            if bundle.generators().is_empty() {
                return Err(Error::InsufficientRows("no fake generators".into()));
            }
            if count(Label::Real, Split::Train) == 0 || count(Label::Real, Split::Test) == 0 {
                return Err(Error::InsufficientRows(
                    "cross-model evaluation needs real rows in train and test".into(),
                ));
            }
            for g in bundle.generators() {
                if bundle.fakes(&g, Split::Train).is_empty() {
                    return Err(Error::InsufficientRows(format!("generator `{g}` has no training rows")));
                }
            }
        }
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::sha256_hex;
    use proptest::prelude::*;
    use std::collections::HashSet;
    use std::path::PathBuf;

    fn rows(n_real: usize, fakes: &[(&str, usize)]) -> Vec<ManifestRow> {
        let mut out = Vec::new();
        for i in 0..n_real {
            out.push(ManifestRow {
                path: PathBuf::from(format!("/r/{i}.png")),
                label: Label::Real,
                generator: "-".into(),
                split: Split::Train,
                content_hash: sha256_hex(format!("real{i}").as_bytes()),
            });
        }
        for (g, n) in fakes {
            for i in 0..*n {
                out.push(ManifestRow {
                    path: PathBuf::from(format!("/f/{g}/{i}.png")),
                    label: Label::Fake,
                    generator: g.to_string(),
                    split: Split::Train,
                    content_hash: sha256_hex(format!("{g}{i}").as_bytes()),
                });
            }
        }
        out
    }

    #[test]
    fn ten_rows_split_8_1_1() {
        assert_eq!(split_counts(10), (8, 1, 1));
        assert_eq!(split_counts(1), (1, 0, 0));
        let mut r = rows(10, &[]);
        assign_splits(&mut r, 7);
        let c = |s| r.iter().filter(|x| x.split == s).count();
        assert_eq!((c(Split::Train), c(Split::Val), c(Split::Test)), (8, 1, 1));
    }

    #[test]
    fn same_seed_same_split_different_seed_differs() {
        let mut a = rows(50, &[("g", 30)]);
        let mut b = a.clone();
        let mut c = a.clone();
        assign_splits(&mut a, 1);
        assign_splits(&mut b, 1);
        assign_splits(&mut c, 2);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn protocol_requirements() {
        let m = DatasetManifest::new(rows(10, &[])).unwrap();
        assert!(matches!(
            split_manifest(&m, Protocol::Standard, 0),
            Err(Error::InsufficientRows(_))
        ));
        let m = DatasetManifest::new(rows(20, &[("a", 10), ("b", 10)])).unwrap();
        let b = split_manifest(&m, Protocol::CrossModel, 0).unwrap();
        assert_eq!(b.generators(), vec!["a".to_string(), "b".to_string()]);
        let train_a = b.generator_rows("a", Split::Train);
        assert!(train_a.iter().all(|r| r.generator != "b"));
        assert_eq!(train_a.len(), 16 + 8);
    }

    #[test]
    fn duplicate_content_stays_in_one_split() {
        let mut r = rows(30, &[]);
        for i in 0..10 {
            r[i + 10].content_hash = r[i].content_hash.clone();
        }
        assign_splits(&mut r, 3);
        for i in 0..10 {
            assert_eq!(r[i].split, r[i + 10].split);
        }
    }

    proptest! {
        #[test]
        fn splits_are_hash_disjoint(n_real in 1usize..60, n_a in 0usize..40, n_b in 0usize..40, seed in any::<u64>()) {
            let mut r = rows(n_real, &[("a", n_a), ("b", n_b)]);
            assign_splits(&mut r, seed);
            let mut by_split: BTreeMap<Split, HashSet<String>> = BTreeMap::new();
            for row in &r {
                by_split.entry(row.split).or_default().insert(row.content_hash.clone());
            }
            let sets: Vec<_> = by_split.values().collect();
            for i in 0..sets.len() {
                for j in i + 1..sets.len() {
                    prop_assert!(sets[i].is_disjoint(sets[j]));
                }
            }
        }
    }
}
