//! Analytic complexity accounting: parameter counts and FLOP trees.
//!
//! FLOPs are multiply-accumulates × 2. Convolutions count
//! `2·Cin·Cout·k²·H'W'/groups`; batched products count `2·m·k·n`; the
//! selective scan counts two multiply-accumulates per token, channel and state
//! (state update and readout). Activations, normalizations, pooling and
//! elementwise arithmetic are ignored.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::nn::ParamStore;
use crate::Scalar;

/// One node of a FLOP breakdown. A node's total is its own count plus the
/// totals of its children.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cost {
    pub name: String,
    pub flops: u64,
    pub children: Vec<Cost>,
}

impl Cost {
    pub fn leaf(name: &str, flops: u64) -> Self {
        Self { name: name.to_string(), flops, children: Vec::new() }
    }

    pub fn node(name: &str, children: Vec<Cost>) -> Self {
        Self { name: name.to_string(), flops: 0, children }
    }

    pub fn total(&self) -> u64 {
        self.flops + self.children.iter().map(Cost::total).sum::<u64>()
    }

    /// Child lookup by dotted path relative to this node.
    pub fn find(&self, path: &str) -> Option<&Cost> {
        let mut cur = self;
        for part in path.split('.').filter(|p| !p.is_empty()) {
            cur = cur.children.iter().find(|c| c.name == part)?;
        }
        Some(cur)
    }

    /// `(dotted path, total)` for every node down to `depth` levels below this one.
    pub fn flatten(&self, depth: usize) -> Vec<(String, u64)> {
        let mut out = Vec::new();
        for c in &self.children {
            c.collect(String::new(), depth, &mut out);
        }
        out
    }

    fn collect(&self, prefix: String, depth: usize, out: &mut Vec<(String, u64)>) {
        let path = if prefix.is_empty() { self.name.clone() } else { format!("{prefix}.{}", self.name) };
        out.push((path.clone(), self.total()));
        if depth > 1 {
            for c in &self.children {
                c.collect(path.clone(), depth - 1, out);
            }
        }
    }

    /// Sum of the totals of all nodes (at any depth) whose name equals `name`.
    pub fn total_named(&self, name: &str) -> u64 {
        if self.name == name {
            return self.total();
        }
        self.children.iter().map(|c| c.total_named(name)).sum()
    }
}

/// Exact number of learnable scalars.
pub fn count_params<T: Scalar>(store: &ParamStore<T>) -> usize {
    store.count()
}

/// Learnable scalars grouped by the first `depth` components of their dotted names.
pub fn params_by_prefix<T: Scalar>(store: &ParamStore<T>, depth: usize) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for (_, name, value) in store.iter() {
        let key: Vec<&str> = name.split('.').take(depth).collect();
        let key = key.join(".");
        match out.iter_mut().find(|(k, _)| *k == key) {
            Some((_, n)) => *n += value.len(),
            None => out.push((key, value.len())),
        }
    }
    out
}

/// Scalars in arrays whose dotted name contains the component `part`.
pub fn params_with_component<T: Scalar>(store: &ParamStore<T>, part: &str) -> usize {
    store.iter().filter(|(_, n, _)| n.split('.').any(|p| p == part)).map(|(_, _, t)| t.len()).sum()
}
