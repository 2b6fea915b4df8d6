//! Seeded synthetic tasks, metrics and significance testing.

mod gen;
mod io;
mod metrics;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use gen::{apply_seq_rule, cipher_table, gen_pair_task, gen_seq2seq_task, gen_task, pair_label};
pub use io::{read_jsonl, write_jsonl};
pub use metrics::{bootstrap_test, evaluate, mean_score, score, Output};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairExample {
    pub s1: Vec<usize>,
    pub s2: Vec<usize>,
    pub label: usize,
}

/// `tgt` holds the target symbols only; models add their own BOS/EOS markers.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SeqExample {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Accuracy,
    TokenAccuracy,
    ExactMatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rule {
    /// Label 1 iff both sequences have the same most frequent symbol (ties go to the smallest symbol).
    SameMajoritySymbol,
    /// Label 1 iff the counts of the task's first symbol in both sequences have equal parity.
    ParityOfTargetCount,
    /// Label 1 iff the sequences share at least one symbol.
    SharedSymbol,
    /// Label 1 iff both sequences start with the same symbol.
    SameFirstSymbol,
    Copy,
    Reverse,
    /// Fixed random permutation of the vocabulary chosen by `key`.
    SubstitutionCipher(u64),
}

impl Rule {
    pub fn is_pair(self) -> bool {
        matches!(
            self,
            Rule::SameMajoritySymbol | Rule::ParityOfTargetCount | Rule::SharedSymbol | Rule::SameFirstSymbol
        )
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::SameMajoritySymbol => f.write_str("same-majority-symbol"),
            Rule::ParityOfTargetCount => f.write_str("parity-of-target-count"),
            Rule::SharedSymbol => f.write_str("shared-symbol"),
            Rule::SameFirstSymbol => f.write_str("same-first-symbol"),
            Rule::Copy => f.write_str("copy"),
            Rule::Reverse => f.write_str("reverse"),
            Rule::SubstitutionCipher(k) => write!(f, "substitution-cipher({k})"),
        }
    }
}

impl FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "same-majority-symbol" => Rule::SameMajoritySymbol,
            "parity-of-target-count" => Rule::ParityOfTargetCount,
            "shared-symbol" => Rule::SharedSymbol,
            "same-first-symbol" => Rule::SameFirstSymbol,
            "copy" => Rule::Copy,
            "reverse" => Rule::Reverse,
            _ => {
                let key = s
                    .strip_prefix("substitution-cipher(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|k| k.parse().ok())
                    .ok_or_else(|| Error::config("rule", format!("unknown rule `{s}`")))?;
                Rule::SubstitutionCipher(key)
            }
        })
    }
}

impl Serialize for Rule {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Rule {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Description of one synthetic task. Symbols are drawn from
/// `vocab_offset .. vocab_offset + vocab_size`, so tasks with disjoint ranges
/// share no tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub rule: Rule,
    pub vocab_size: usize,
    #[serde(default)]
    pub vocab_offset: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("task `{}`.{f}", self.name);
        if self.vocab_size < 2 {
            return Err(Error::config(field("vocab_size"), "needs at least 2 symbols"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(
                field("min_len"),
                format!("need 1 <= min_len <= max_len, got {}..{}", self.min_len, self.max_len),
            ));
        }
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(Error::config(field("train"), "every split needs at least one example"));
        }
        Ok(())
    }

    /// One past the largest symbol id.
    pub fn vocab_end(&self) -> usize {
        self.vocab_offset + self.vocab_size
    }

    pub fn metric(&self) -> Metric {
        if self.rule.is_pair() {
            Metric::Accuracy
        } else {
            Metric::ExactMatch
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset<E> {
    pub spec: TaskSpec,
    pub train: Vec<E>,
    pub val: Vec<E>,
    pub test: Vec<E>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl<E> TaskDataset<E> {
    pub fn split(&self, split: Split) -> &[E] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// A generated task of either kind.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskData {
    Pair(TaskDataset<PairExample>),
    Seq(TaskDataset<SeqExample>),
}

impl TaskData {
    pub fn spec(&self) -> &TaskSpec {
        match self {
            TaskData::Pair(d) => &d.spec,
            TaskData::Seq(d) => &d.spec,
        }
    }
}
