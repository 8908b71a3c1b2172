use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SampleRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Input(format!("unknown split `{s}`"))),
        }
    }
}

/// Patient id → split.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitAssignment(BTreeMap<u32, Split>);

impl SplitAssignment {
    pub fn get(&self, patient: u32) -> Option<Split> {
        self.0.get(&patient).copied()
    }

    pub fn insert(&mut self, patient: u32, split: Split) {
        self.0.insert(patient, split);
    }

    pub fn patients(&self, split: Split) -> impl Iterator<Item = u32> + '_ {
        self.0.iter().filter(move |(_, &s)| s == split).map(|(&p, _)| p)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Seeded shuffle of the unique patient ids, then contiguous 70/20/10 %
/// blocks. Validation and test sizes are rounded down, so train absorbs the
/// remainder.
pub fn patient_split(records: &[SampleRecord], seed: u64) -> Result<SplitAssignment> {
    let ids: BTreeSet<u32> = records.iter().map(|r| r.patient_id).collect();
    let n = ids.len();
    if n < 10 {
        return Err(Error::Input(format!(
            "patient split needs at least 10 patients, got {n}"
        )));
    }
    let mut ids: Vec<u32> = ids.into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = n * 2 / 10;
    let n_test = n / 10;
    let n_train = n - n_val - n_test;
    let mut out = SplitAssignment::default();
    for (i, id) in ids.into_iter().enumerate() {
        let s = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        out.insert(id, s);
    }
    Ok(out)
}
