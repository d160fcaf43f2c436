use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{NodeId, TaxonomyError, TaxonomyTree};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletViolation {
    pub a: String,
    pub b: String,
    pub c: String,
    pub depth_ab: usize,
    pub depth_ac: usize,
    pub depth_bc: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletReport {
    pub exhaustive: bool,
    /// Ordered leaf triples examined.
    pub checked: u64,
    /// Triples whose premise `depth(A,B) > depth(A,C)` held.
    pub premise_held: u64,
    pub violations: Vec<TripletViolation>,
}

impl TripletReport {
    pub fn is_consistent(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the rooted-triplet property on leaf triples: whenever
/// `LCA(A,B)` is strictly deeper than `LCA(A,C)`, `LCA(A,C)` must be the same
/// node as `LCA(B,C)`.
///
/// All ordered triples of distinct leaves are enumerated when there are at
/// most `sample_count` of them; otherwise `sample_count` triples are drawn
/// from a ChaCha stream seeded with `seed`.
pub fn verify_triplet_consistency(
    tree: &TaxonomyTree,
    sample_count: u64,
    seed: u64,
) -> Result<TripletReport, TaxonomyError> {
    let leaves = tree.leaves();
    let n = leaves.len() as u64;
    let total = if n < 3 { 0 } else { n * (n - 1) * (n - 2) };
    let mut report =
        TripletReport { exhaustive: total <= sample_count, checked: 0, premise_held: 0, violations: Vec::new() };

    let check = |a: NodeId, b: NodeId, c: NodeId, report: &mut TripletReport| -> Result<(), TaxonomyError> {
        report.checked += 1;
        let ab = tree.lca(a, b)?;
        let ac = tree.lca(a, c)?;
        let depth = |id: NodeId| tree.nodes()[id].depth;
        if depth(ab) > depth(ac) {
            report.premise_held += 1;
            let bc = tree.lca(b, c)?;
            if ac != bc {
                report.violations.push(TripletViolation {
                    a: tree.nodes()[a].name.clone(),
                    b: tree.nodes()[b].name.clone(),
                    c: tree.nodes()[c].name.clone(),
                    depth_ab: depth(ab),
                    depth_ac: depth(ac),
                    depth_bc: depth(bc),
                });
            }
        }
        Ok(())
    };

    if total == 0 {
        return Ok(report);
    }
    if report.exhaustive {
        for &a in leaves {
            for &b in leaves {
                for &c in leaves {
                    if a != b && a != c && b != c {
                        check(a, b, c, &mut report)?;
                    }
                }
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = leaves.len();
        for _ in 0..sample_count {
            let i = rng.random_range(0..len);
            let mut j = rng.random_range(0..len - 1);
            if j >= i {
                j += 1;
            }
            let mut k = rng.random_range(0..len - 2);
            for bound in [i.min(j), i.max(j)] {
                if k >= bound {
                    k += 1;
                }
            }
            check(leaves[i], leaves[j], leaves[k], &mut report)?;
        }
    }
    Ok(report)
}
