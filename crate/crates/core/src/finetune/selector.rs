use std::collections::BTreeSet;

use glob::Pattern;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamRegistry;

/// Ordered glob patterns over registry names; a name is selected when any
/// pattern matches it. `*` also matches `.` separators.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamSelector {
    pub patterns: Vec<String>,
}

impl ParamSelector {
    pub fn new<S: Into<String>>(patterns: impl IntoIterator<Item = S>) -> Self {
        ParamSelector {
            patterns: patterns.into_iter().map(Into::into).collect(),
        }
    }

    /// All normalization scales/shifts plus the mid block's time projections.
    pub fn default_controlnext() -> Self {
        Self::new(["*.norm.*", "mid.*.temb.*"])
    }

    /// Every backbone parameter (full fine-tuning).
    pub fn all() -> Self {
        Self::new(["*"])
    }
}

impl Default for ParamSelector {
    fn default() -> Self {
        Self::default_controlnext()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Selection {
    pub names: BTreeSet<String>,
    /// Patterns that matched nothing.
    pub unmatched: Vec<String>,
}

pub fn resolve_selector(sel: &ParamSelector, reg: &ParamRegistry) -> Result<Selection> {
    let patterns = sel
        .patterns
        .iter()
        .map(|p| {
            Pattern::new(p)
                .map_err(|e| Error::Config(format!("invalid selector pattern `{p}`: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Selection::default();
    let mut hit = vec![false; patterns.len()];
    for name in reg.names() {
        for (i, p) in patterns.iter().enumerate() {
            if p.matches(name) {
                hit[i] = true;
                out.names.insert(name.to_string());
            }
        }
    }
    for (p, h) in sel.patterns.iter().zip(hit) {
        if !h {
            log::warn!("selector pattern `{p}` matches no parameter");
            out.unmatched.push(p.clone());
        }
    }
    Ok(out)
}
