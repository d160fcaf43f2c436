//! Uniform-level taxonomy trees (cladograms) and the pairwise relations
//! they induce.
//!
//! A pair of species is related by the depth of the lowest common ancestor
//! of their leaves. The root sits at depth 0 and every leaf at depth `R - 1`,
//! so relations take values `0..R` and two samples of the same species have
//! relation `R - 1`.

mod newick;
mod triplet;
mod weights;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use newick::parse_newick;
pub use triplet::{verify_triplet_consistency, TripletReport, TripletViolation};
pub use weights::{relation_weights, relation_weights_with, RelationWeights, WeightRule};

pub type NodeId = usize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("newick syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("leaf '{leaf}' sits at depth {depth}, expected every leaf at depth {expected}")]
    RaggedLeafDepth { leaf: String, depth: usize, expected: usize },
    #[error("duplicate leaf name '{0}'")]
    DuplicateLeaf(String),
    #[error("leaf at node {0} has no name")]
    UnnamedLeaf(NodeId),
    #[error("tree must have at least two levels (root plus leaves)")]
    TooShallow,
    #[error("tree has no root or more than one root")]
    BadRoot,
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("unknown species '{0}'")]
    UnknownSpecies(String),
    #[error("truncation depth {requested} outside [2, {max}]")]
    DepthOutOfRange { requested: usize, max: usize },
    #[error("relation histogram is empty or holds fewer than two samples")]
    EmptyHistogram,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub depth: usize,
    pub name: String,
    pub children: Vec<NodeId>,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// Discrete relation level of a pair: the depth of its LCA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationIndex(pub usize);

impl RelationIndex {
    pub fn value(self) -> usize {
        self.0
    }
}

/// Immutable rooted taxonomy with all leaves on one level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaxonomyTree {
    nodes: Vec<Node>,
    root: NodeId,
    /// Leaf ids in left-to-right order.
    leaves: Vec<NodeId>,
    leaf_index: BTreeMap<String, NodeId>,
    /// Species name -> node carrying that species. Identical to `leaf_index`
    /// unless the tree was truncated, in which case species route to their
    /// surviving ancestor.
    species: BTreeMap<String, NodeId>,
    num_levels: usize,
}

impl TaxonomyTree {
    /// Builds a tree from `(name, parent)` records listed in pre-order
    /// (every parent precedes its children). Validates every invariant.
    pub fn from_parents(records: Vec<(String, Option<NodeId>)>) -> Result<Self, TaxonomyError> {
        let mut nodes: Vec<Node> = Vec::with_capacity(records.len());
        let mut root = None;
        for (id, (name, parent)) in records.into_iter().enumerate() {
            let depth = match parent {
                None => {
                    if root.replace(id).is_some() {
                        return Err(TaxonomyError::BadRoot);
                    }
                    0
                }
                Some(p) if p < id => {
                    nodes[p].children.push(id);
                    nodes[p].depth + 1
                }
                Some(p) => return Err(TaxonomyError::UnknownNode(p)),
            };
            nodes.push(Node { id, parent, depth, name, children: Vec::new() });
        }
        let root = root.ok_or(TaxonomyError::BadRoot)?;
        Self::validate(nodes, root, None)
    }

    fn validate(
        nodes: Vec<Node>,
        root: NodeId,
        species: Option<BTreeMap<String, NodeId>>,
    ) -> Result<Self, TaxonomyError> {
        // left-to-right leaf order via explicit-stack DFS
        let mut leaves = Vec::new();
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            let node = &nodes[id];
            if node.is_leaf() {
                leaves.push(id);
            } else {
                stack.extend(node.children.iter().rev());
            }
        }
        let leaf_depth = nodes[leaves[0]].depth;
        if leaf_depth == 0 {
            return Err(TaxonomyError::TooShallow);
        }
        let mut leaf_index = BTreeMap::new();
        for &leaf in &leaves {
            let node = &nodes[leaf];
            if node.depth != leaf_depth {
                return Err(TaxonomyError::RaggedLeafDepth {
                    leaf: node.name.clone(),
                    depth: node.depth,
                    expected: leaf_depth,
                });
            }
            if node.name.is_empty() {
                return Err(TaxonomyError::UnnamedLeaf(leaf));
            }
            if leaf_index.insert(node.name.clone(), leaf).is_some() {
                return Err(TaxonomyError::DuplicateLeaf(node.name.clone()));
            }
        }
        let species = species.unwrap_or_else(|| leaf_index.clone());
        Ok(Self { nodes, root, leaves, leaf_index, species, num_levels: leaf_depth + 1 })
    }

    /// Full tree from per-level branching factors. Leaves are named
    /// `s0, s1, ...`; internal nodes `L<depth>_<k>`.
    pub fn from_branching(branching: &[usize]) -> Result<Self, TaxonomyError> {
        if branching.is_empty() {
            return Err(TaxonomyError::TooShallow);
        }
        let mut records: Vec<(String, Option<NodeId>)> = vec![("root".to_string(), None)];
        let mut per_depth = vec![0usize; branching.len() + 1];
        // pre-order, matching the node order the Newick parser produces
        fn grow(
            parent: NodeId,
            depth: usize,
            branching: &[usize],
            per_depth: &mut [usize],
            records: &mut Vec<(String, Option<NodeId>)>,
        ) {
            for _ in 0..branching[depth - 1] {
                let k = per_depth[depth];
                per_depth[depth] += 1;
                let name = if depth == branching.len() { format!("s{k}") } else { format!("L{depth}_{k}") };
                let id = records.len();
                records.push((name, Some(parent)));
                if depth < branching.len() {
                    grow(id, depth + 1, branching, per_depth, records);
                }
            }
        }
        grow(0, 1, branching, &mut per_depth, &mut records);
        Self::from_parents(records)
    }

    /// Random cladogram with `levels` relation classes (leaves at depth
    /// `levels - 1`); every internal node gets a child count drawn uniformly
    /// from `min_children..=max_children`.
    pub fn random<R: Rng + ?Sized>(
        levels: usize,
        min_children: usize,
        max_children: usize,
        rng: &mut R,
    ) -> Result<Self, TaxonomyError> {
        if levels < 2 {
            return Err(TaxonomyError::TooShallow);
        }
        let mut records = vec![("root".to_string(), None)];
        let mut frontier = vec![0usize];
        let mut leaf_counter = 0;
        for depth in 1..levels {
            let mut next = Vec::new();
            for &parent in &frontier {
                let b = rng.random_range(min_children.max(1)..=max_children.max(min_children.max(1)));
                for _ in 0..b {
                    let name = if depth == levels - 1 {
                        leaf_counter += 1;
                        format!("t{}", leaf_counter - 1)
                    } else {
                        format!("n{}", records.len())
                    };
                    next.push(records.len());
                    records.push((name, Some(parent)));
                }
            }
            frontier = next;
        }
        Self::from_parents(records)
    }

    pub fn num_levels(&self) -> usize {
        self.num_levels
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Result<&Node, TaxonomyError> {
        self.nodes.get(id).ok_or(TaxonomyError::UnknownNode(id))
    }

    /// Leaf ids in left-to-right order.
    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = &str> + '_ {
        self.leaves.iter().map(|&id| self.nodes[id].name.as_str())
    }

    pub fn leaf_index(&self) -> &BTreeMap<String, NodeId> {
        &self.leaf_index
    }

    /// Node that answers relation queries for `species`.
    pub fn species_node(&self, species: &str) -> Result<NodeId, TaxonomyError> {
        self.species.get(species).copied().ok_or_else(|| TaxonomyError::UnknownSpecies(species.to_string()))
    }

    pub fn contains_species(&self, species: &str) -> bool {
        self.species.contains_key(species)
    }

    /// Every species name the tree can answer for, sorted.
    pub fn species_names(&self) -> impl Iterator<Item = &str> + '_ {
        self.species.keys().map(String::as_str)
    }

    /// Ancestor of `id` at `depth` (or `id` itself when already that shallow).
    pub fn ancestor_at(&self, mut id: NodeId, depth: usize) -> NodeId {
        while self.nodes[id].depth > depth {
            id = self.nodes[id].parent.expect("non-root node has a parent");
        }
        id
    }

    pub fn lca(&self, a: NodeId, b: NodeId) -> Result<NodeId, TaxonomyError> {
        self.node(a)?;
        self.node(b)?;
        let (mut a, mut b) = (a, b);
        let depth = self.nodes[a].depth.min(self.nodes[b].depth);
        a = self.ancestor_at(a, depth);
        b = self.ancestor_at(b, depth);
        while a != b {
            a = self.nodes[a].parent.expect("distinct nodes at depth 0 impossible");
            b = self.nodes[b].parent.expect("distinct nodes at depth 0 impossible");
        }
        Ok(a)
    }

    pub fn relation_depth(&self, species_i: &str, species_j: &str) -> Result<RelationIndex, TaxonomyError> {
        let a = self.species_node(species_i)?;
        let b = self.species_node(species_j)?;
        Ok(RelationIndex(self.nodes[self.lca(a, b)?].depth))
    }

    /// Merges every level below `new_depth - 1` into its ancestor at that
    /// depth. Species keep resolving, now to their surviving ancestor.
    pub fn truncate(&self, new_depth: usize) -> Result<Self, TaxonomyError> {
        if new_depth < 2 || new_depth > self.num_levels {
            return Err(TaxonomyError::DepthOutOfRange { requested: new_depth, max: self.num_levels });
        }
        if new_depth == self.num_levels {
            return Ok(self.clone());
        }
        let cut = new_depth - 1;
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut nodes: Vec<Node> = Vec::new();
        // Ids ascend parent-before-child both for parsed and built trees, but
        // walk in DFS order to be independent of id layout.
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            let old = &self.nodes[id];
            if old.depth > cut {
                continue;
            }
            let new_id = nodes.len();
            remap[id] = new_id;
            let parent = old.parent.map(|p| remap[p]);
            if let Some(p) = parent {
                nodes[p].children.push(new_id);
            }
            let name = if old.depth == cut && old.name.is_empty() { format!("clade{id}") } else { old.name.clone() };
            nodes.push(Node { id: new_id, parent, depth: old.depth, name, children: Vec::new() });
            if old.depth < cut {
                stack.extend(old.children.iter().rev());
            }
        }
        let species = self
            .species
            .iter()
            .map(|(name, &id)| (name.clone(), remap[self.ancestor_at(id, cut)]))
            .collect::<BTreeMap<_, _>>();
        let root = remap[self.root];
        let mut tree = Self::validate(nodes, root, Some(species))?;
        // Surviving leaves answer for their own names too.
        for (name, &id) in &tree.leaf_index {
            tree.species.entry(name.clone()).or_insert(id);
        }
        Ok(tree)
    }

    /// Newick serialization (no branch lengths). Internal names are written
    /// when present.
    pub fn to_newick(&self) -> String {
        let mut out = String::new();
        self.write_newick(self.root, &mut out);
        out.push(';');
        out
    }

    fn write_newick(&self, id: NodeId, out: &mut String) {
        let node = &self.nodes[id];
        if !node.is_leaf() {
            out.push('(');
            for (i, &c) in node.children.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                self.write_newick(c, out);
            }
            out.push(')');
        }
        newick::write_label(&node.name, out);
    }
}

/// Dense species-by-species relation lookup for a fixed species ordering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationTable {
    species: Vec<String>,
    index: BTreeMap<String, usize>,
    table: Vec<u8>,
    num_levels: usize,
}

impl RelationTable {
    pub fn new(tree: &TaxonomyTree, species: &[String]) -> Result<Self, TaxonomyError> {
        let n = species.len();
        let nodes = species.iter().map(|s| tree.species_node(s)).collect::<Result<Vec<_>, _>>()?;
        let mut table = vec![0u8; n * n];
        for i in 0..n {
            for j in i..n {
                let d = tree.nodes[tree.lca(nodes[i], nodes[j])?].depth as u8;
                table[i * n + j] = d;
                table[j * n + i] = d;
            }
        }
        let index = species.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Ok(Self { species: species.to_vec(), index, table, num_levels: tree.num_levels })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> usize {
        self.table[i * self.species.len() + j] as usize
    }

    pub fn index_of(&self, species: &str) -> Option<usize> {
        self.index.get(species).copied()
    }

    pub fn species(&self) -> &[String] {
        &self.species
    }

    pub fn num_levels(&self) -> usize {
        self.num_levels
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Brute-force LCA: materialize both root paths, keep the deepest shared node.
    fn lca_oracle(tree: &TaxonomyTree, a: NodeId, b: NodeId) -> NodeId {
        let path = |mut id: NodeId| {
            let mut p = vec![id];
            while let Some(parent) = tree.nodes()[id].parent {
                p.push(parent);
                id = parent;
            }
            p
        };
        let pa = path(a);
        let pb = path(b);
        pa.into_iter().filter(|x| pb.contains(x)).max_by_key(|&x| tree.nodes()[x].depth).unwrap()
    }

    #[test]
    fn lca_basic_shapes() {
        let t = parse_newick("((A,B),(C,D));").unwrap();
        let a = t.leaf_index()["A"];
        let b = t.leaf_index()["B"];
        assert_eq!(t.lca(a, a).unwrap(), a);
        let ab = t.lca(a, b).unwrap();
        assert_eq!(t.node(ab).unwrap().depth, 1);
        assert_eq!(t.nodes()[a].parent, Some(ab));
        assert_eq!(t.lca(a, 99), Err(TaxonomyError::UnknownNode(99)));
    }

    #[test]
    fn lca_matches_root_path_oracle_on_random_tree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tree = TaxonomyTree::random(6, 2, 5, &mut rng).unwrap();
        assert!(tree.leaves().len() >= 200, "{}", tree.leaves().len());
        let n = tree.nodes().len();
        for _ in 0..2000 {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            assert_eq!(tree.lca(a, b).unwrap(), lca_oracle(&tree, a, b));
        }
    }

    #[test]
    fn relation_depth_conventions() {
        let t = parse_newick("((A,B),(C,D));").unwrap();
        assert_eq!(t.num_levels(), 3);
        assert_eq!(t.relation_depth("A", "A").unwrap(), RelationIndex(2));
        assert_eq!(t.relation_depth("A", "B").unwrap(), RelationIndex(1));
        assert_eq!(t.relation_depth("A", "D").unwrap(), RelationIndex(0));
        assert_eq!(t.relation_depth("A", "Z"), Err(TaxonomyError::UnknownSpecies("Z".into())));
    }

    #[test]
    fn five_level_tree_has_five_relation_classes() {
        let t = TaxonomyTree::from_branching(&[2, 2, 2, 2]).unwrap();
        let names: Vec<String> = t.leaf_names().map(String::from).collect();
        let mut seen = std::collections::BTreeSet::new();
        for a in &names {
            for b in &names {
                seen.insert(t.relation_depth(a, b).unwrap().value());
            }
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn relation_depth_matches_oracle_on_random_trees() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let tree = TaxonomyTree::random(rng.random_range(2..7), 1, 4, &mut rng).unwrap();
            let names: Vec<String> = tree.leaf_names().map(String::from).collect();
            for _ in 0..200 {
                let a = &names[rng.random_range(0..names.len())];
                let b = &names[rng.random_range(0..names.len())];
                let oracle = lca_oracle(&tree, tree.leaf_index()[a], tree.leaf_index()[b]);
                let got = tree.relation_depth(a, b).unwrap();
                assert_eq!(got.value(), tree.nodes()[oracle].depth);
                assert_eq!(got, tree.relation_depth(b, a).unwrap());
            }
        }
    }

    #[test]
    fn truncate_identity_and_star() {
        let t = parse_newick("((A,B),(C,D));").unwrap();
        assert_eq!(t.truncate(3).unwrap(), t);
        let star = t.truncate(2).unwrap();
        assert_eq!(star.num_levels(), 2);
        assert_eq!(star.leaves().len(), 2);
        assert_eq!(star.relation_depth("A", "B").unwrap(), RelationIndex(1));
        assert_eq!(star.relation_depth("A", "C").unwrap(), RelationIndex(0));
        assert!(matches!(t.truncate(1), Err(TaxonomyError::DepthOutOfRange { .. })));
        assert!(matches!(t.truncate(4), Err(TaxonomyError::DepthOutOfRange { .. })));
    }

    #[test]
    fn truncation_to_two_on_flat_tree_gives_star() {
        let t = parse_newick("((A,B),(C,D));").unwrap();
        // Star over the original species: merge leaves into depth-1 clades, then every
        // distinct-clade pair is relation 0.
        let star = t.truncate(2).unwrap();
        for a in ["A", "B"] {
            for c in ["C", "D"] {
                assert_eq!(star.relation_depth(a, c).unwrap().value(), 0);
            }
        }
    }

    #[test]
    fn truncation_clamps_relations_against_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tree = TaxonomyTree::random(5, 2, 3, &mut rng).unwrap();
        let names: Vec<String> = tree.leaf_names().map(String::from).collect();
        for depth in 2..=5 {
            let cut = tree.truncate(depth).unwrap();
            assert_eq!(cut.num_levels(), depth);
            for a in &names {
                for b in &names {
                    // oracle: LCA by root paths on the merged tree
                    let na = cut.species_node(a).unwrap();
                    let nb = cut.species_node(b).unwrap();
                    let oracle = cut.nodes()[lca_oracle(&cut, na, nb)].depth;
                    let old = tree.relation_depth(a, b).unwrap().value();
                    assert_eq!(oracle, old.min(depth - 1));
                    assert_eq!(cut.relation_depth(a, b).unwrap().value(), oracle);
                }
            }
        }
    }

    #[test]
    fn relation_table_agrees_with_tree() {
        let t = TaxonomyTree::from_branching(&[3, 2, 2]).unwrap();
        let names: Vec<String> = t.leaf_names().map(String::from).collect();
        let table = RelationTable::new(&t, &names).unwrap();
        for (i, a) in names.iter().enumerate() {
            for (j, b) in names.iter().enumerate() {
                assert_eq!(table.get(i, j), t.relation_depth(a, b).unwrap().value());
            }
        }
    }
}
