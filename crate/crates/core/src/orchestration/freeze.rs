//! Trainable-parameter masks. A mask is a set of name prefixes matched on
//! whole path segments: `enc/1` covers `enc/1/stem/w` but not `enc/10/...`.

use std::collections::BTreeSet;

use crate::autograd::ParamStore;
use crate::error::{Error, Result};

/// Top-level parameter families.
pub const FAMILIES: [&str; 5] = ["enc", "ha", "mc", "fus", "head"];

pub fn is_known_family(name: &str) -> bool {
    FAMILIES.contains(&name.split('/').next().unwrap_or(""))
}

fn normalize(prefix: &str) -> String {
    prefix.trim().trim_matches('/').to_string()
}

/// Segment-wise prefix test.
pub fn prefix_matches(prefix: &str, name: &str) -> bool {
    name == prefix || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'/'))
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FreezeMask {
    prefixes: BTreeSet<String>,
}

impl FreezeMask {
    pub fn new<I: IntoIterator<Item = S>, S: AsRef<str>>(prefixes: I) -> Self {
        Self {
            prefixes: prefixes
                .into_iter()
                .map(|p| normalize(p.as_ref()))
                .filter(|p| !p.is_empty())
                .collect(),
        }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Ego encoder, fusion and head.
    pub fn base(ego: usize) -> Self {
        Self::new([format!("enc/{ego}"), "fus".into(), "head".into()])
    }

    /// The new agent's adapters and its fresh stem.
    pub fn lhft(agent: usize) -> Self {
        Self::new([format!("ha/{agent}"), format!("enc/{agent}/stem")])
    }

    pub fn gcft() -> Self {
        Self::new(["mc"])
    }

    /// Comma-separated prefixes; blank means empty.
    pub fn parse(s: &str) -> Self {
        Self::new(s.split(','))
    }

    pub fn prefixes(&self) -> impl Iterator<Item = &str> {
        self.prefixes.iter().map(String::as_str)
    }

    pub fn matches(&self, name: &str) -> bool {
        self.prefixes.iter().any(|p| prefix_matches(p, name))
    }

    /// Names selected by the mask. Every prefix must match something.
    pub fn resolve(&self, params: &ParamStore) -> Result<Vec<String>> {
        for p in &self.prefixes {
            if !params.names().any(|n| prefix_matches(p, n)) {
                return Err(Error::UnmatchedPrefix(p.clone()));
            }
        }
        Ok(params.names().filter(|n| self.matches(n)).map(str::to_string).collect())
    }

    /// Marks matched names trainable and everything else frozen.
    pub fn apply(&self, params: &mut ParamStore) -> Result<Vec<String>> {
        let names = self.resolve(params)?;
        params.freeze_all();
        for n in &names {
            params.set_trainable(n, true)?;
        }
        Ok(names)
    }
}

/// Element count selected by `mask`. A prefix outside the known families
/// is rejected; a known family that is absent (an adapter not yet
/// inserted) contributes zero.
pub fn count_trainable_params(params: &ParamStore, mask: &FreezeMask) -> Result<usize> {
    for p in mask.prefixes() {
        if !is_known_family(p) {
            return Err(Error::UnknownPrefix(p.to_string()));
        }
    }
    Ok(params.iter().filter(|(n, _, _)| mask.matches(n)).map(|(_, t, _)| t.len()).sum())
}
