//! Lazy conditioned trees and small finite trees.
//!
//! [`TreeHandle`] describes an infinite Galton-Watson tree conditioned on
//! survival as a pure function of `(seed, laws)`: the record of a vertex is
//! computed from a key obtained by folding the child indices of its path into
//! the seed. Nothing is stored, so any number of threads can explore the same
//! tree and always see the same vertices.
//!
//! [`FiniteTree`] is a flat breadth-first arena used for trap trees and for
//! the rejection-sampled oracle trees.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::pgf::{DerivedLaws, OffspringLaw};
use crate::rng::{fold, mix64, CounterRng};

const ROOT_TAG: u64 = 0x7452_4545_524F_4F54;

/// Path of child indices from the root. The empty path is the root.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct VertexId(Vec<u32>);

impl VertexId {
    pub fn root() -> Self {
        Self(Vec::new())
    }

    pub fn from_path(path: Vec<u32>) -> Self {
        Self(path)
    }

    pub fn path(&self) -> &[u32] {
        &self.0
    }

    pub fn level(&self) -> u32 {
        self.0.len() as u32
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }

    pub fn child(&self, index: u32) -> Self {
        let mut path = self.0.clone();
        path.push(index);
        Self(path)
    }

    pub fn parent(&self) -> Option<Self> {
        let (_, rest) = self.0.split_last()?;
        Some(Self(rest.to_vec()))
    }

    /// True if `self` lies in the subtree rooted at `ancestor` (inclusive).
    pub fn descends_from(&self, ancestor: &VertexId) -> bool {
        self.0.starts_with(&ancestor.0)
    }
}

/// Root renders as `·`, other vertices as dot-separated indices.
impl fmt::Display for VertexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("·");
        }
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl FromStr for VertexId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "·" || s.is_empty() {
            return Ok(Self::root());
        }
        s.split('.')
            .map(|c| c.parse::<u32>().map_err(|_| Error::Parse(format!("bad vertex path {s:?}"))))
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VertexRecord {
    pub total_children: u32,
    /// Children `0..backbone_children` are backbone; the rest are trap roots.
    pub backbone_children: u32,
    pub is_backbone: bool,
    pub level: u32,
}

impl VertexRecord {
    /// Number of trap trees hanging off this vertex (`M_x` for backbone vertices).
    pub fn trap_children(&self) -> u32 {
        self.total_children - self.backbone_children
    }

    pub fn child_is_backbone(&self, index: u32) -> bool {
        index < self.backbone_children
    }
}

/// A located vertex: its randomness key and record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Node {
    pub key: u64,
    pub record: VertexRecord,
}

/// Result of a capped height computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Height {
    Exact(u32),
    AtLeast(u32),
}

impl Height {
    /// The value, with capped heights reported at the cap.
    pub fn value(self) -> u32 {
        match self {
            Height::Exact(h) | Height::AtLeast(h) => h,
        }
    }
}

/// Infinite conditioned tree, generated on demand.
#[derive(Debug, Clone)]
pub struct TreeHandle {
    seed: u64,
    laws: Arc<DerivedLaws>,
}

impl TreeHandle {
    pub fn new(seed: u64, laws: Arc<DerivedLaws>) -> Self {
        Self { seed, laws }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn laws(&self) -> &DerivedLaws {
        &self.laws
    }

    fn make_node(&self, key: u64, is_backbone: bool, level: u32) -> Node {
        let u = CounterRng::new(key).next_f64();
        let (total_children, backbone_children) = if is_backbone {
            self.laws.backbone_joint.sample(u)
        } else {
            // trap vertices only exist when the trap law does
            let trap = self.laws.trap.as_ref().expect("trap vertex without a trap law");
            (trap.sample(u), 0)
        };
        Node {
            key,
            record: VertexRecord {
                total_children,
                backbone_children,
                is_backbone,
                level,
            },
        }
    }

    pub fn root(&self) -> Node {
        self.make_node(mix64(self.seed ^ ROOT_TAG), true, 0)
    }

    pub fn child(&self, parent: &Node, index: u32) -> Result<Node> {
        let rec = parent.record;
        if index >= rec.total_children {
            return Err(Error::Address(format!(
                "child index {index} at level {} but vertex has {} children",
                rec.level, rec.total_children
            )));
        }
        Ok(self.child_unchecked(parent, index))
    }

    #[inline]
    pub(crate) fn child_unchecked(&self, parent: &Node, index: u32) -> Node {
        let rec = parent.record;
        self.make_node(fold(parent.key, u64::from(index)), rec.child_is_backbone(index), rec.level + 1)
    }

    pub fn locate(&self, v: &VertexId) -> Result<Node> {
        let mut node = self.root();
        for &i in v.path() {
            node = self.child(&node, i)?;
        }
        Ok(node)
    }

    pub fn expand(&self, v: &VertexId) -> Result<VertexRecord> {
        self.locate(v).map(|n| n.record)
    }

    /// Height of the trap subtree rooted at `node` (0 for a leaf), capped.
    pub fn subtree_height(&self, node: &Node, cap: u32) -> Height {
        let mut best = 0u32;
        let mut stack = vec![(*node, 0u32)];
        while let Some((n, depth)) = stack.pop() {
            best = best.max(depth);
            if best >= cap {
                return Height::AtLeast(cap);
            }
            for i in 0..n.record.total_children {
                stack.push((self.child_unchecked(&n, i), depth + 1));
            }
        }
        Height::Exact(best)
    }

    /// Height of the branch of traps hanging off a backbone vertex: 0 when it
    /// has no trap children, otherwise one more than the tallest trap tree.
    pub fn branch_height(&self, v: &VertexId, cap: u32) -> Result<Height> {
        let node = self.locate(v)?;
        self.branch_height_at(&node, cap)
    }

    pub fn branch_height_at(&self, node: &Node, cap: u32) -> Result<Height> {
        if cap == 0 {
            return Err(Error::Domain("height cap must be positive".into()));
        }
        let rec = node.record;
        if !rec.is_backbone {
            return Err(Error::Domain("branch height is defined for backbone vertices".into()));
        }
        let mut best = Height::Exact(0);
        for i in rec.backbone_children..rec.total_children {
            let child = self.child_unchecked(node, i);
            match self.subtree_height(&child, cap - 1) {
                Height::AtLeast(_) => return Ok(Height::AtLeast(cap)),
                Height::Exact(h) => best = Height::Exact(best.value().max(h + 1)),
            }
        }
        Ok(best)
    }

    /// Breadth-first copy of generations `0..=depth`.
    pub fn truncate(&self, depth: u32) -> FiniteTree {
        let mut builder = FiniteTreeBuilder::new(true);
        let mut frontier = vec![(0usize, self.root())];
        for _ in 0..depth {
            let mut next = Vec::new();
            for (idx, node) in frontier {
                let first = builder.len();
                for i in 0..node.record.total_children {
                    let child = self.child_unchecked(&node, i);
                    let cidx = builder.push(idx, child.record.is_backbone);
                    next.push((cidx, child));
                }
                builder.set_children(idx, first, node.record.total_children);
            }
            frontier = next;
        }
        builder.finish()
    }
}

/// Finite rooted tree stored breadth-first: the children of every vertex are
/// contiguous. Vertex 0 is the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FiniteTree {
    parent: Vec<u32>,
    first_child: Vec<u32>,
    child_count: Vec<u32>,
    level: Vec<u32>,
    backbone: Vec<bool>,
}

struct FiniteTreeBuilder {
    tree: FiniteTree,
}

impl FiniteTreeBuilder {
    fn new(root_backbone: bool) -> Self {
        Self {
            tree: FiniteTree {
                parent: vec![u32::MAX],
                first_child: vec![0],
                child_count: vec![0],
                level: vec![0],
                backbone: vec![root_backbone],
            },
        }
    }

    fn len(&self) -> usize {
        self.tree.parent.len()
    }

    fn push(&mut self, parent: usize, backbone: bool) -> usize {
        let t = &mut self.tree;
        let idx = t.parent.len();
        t.parent.push(parent as u32);
        t.first_child.push(0);
        t.child_count.push(0);
        t.level.push(t.level[parent] + 1);
        t.backbone.push(backbone);
        idx
    }

    fn set_children(&mut self, v: usize, first: usize, count: u32) {
        self.tree.first_child[v] = if count == 0 { 0 } else { first as u32 };
        self.tree.child_count[v] = count;
    }

    fn finish(self) -> FiniteTree {
        self.tree
    }
}

impl FiniteTree {
    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn parent(&self, v: usize) -> Option<usize> {
        (v != 0).then(|| self.parent[v] as usize)
    }

    #[inline]
    pub fn child_count(&self, v: usize) -> u32 {
        self.child_count[v]
    }

    #[inline]
    pub fn child(&self, v: usize, i: u32) -> usize {
        debug_assert!(i < self.child_count[v]);
        (self.first_child[v] + i) as usize
    }

    pub fn children(&self, v: usize) -> std::ops::Range<usize> {
        let f = self.first_child[v] as usize;
        f..f + self.child_count[v] as usize
    }

    pub fn level(&self, v: usize) -> u32 {
        self.level[v]
    }

    pub fn is_backbone(&self, v: usize) -> bool {
        self.backbone[v]
    }

    pub fn height(&self) -> u32 {
        self.level.iter().copied().max().unwrap_or(0)
    }

    /// Number of vertices in each generation.
    pub fn generation_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.height() as usize + 1];
        for &l in &self.level {
            sizes[l as usize] += 1;
        }
        sizes
    }

    pub fn vertex_id(&self, mut v: usize) -> VertexId {
        let mut path = Vec::new();
        while let Some(p) = self.parent(v) {
            path.push((v - self.first_child[p] as usize) as u32);
            v = p;
        }
        path.reverse();
        VertexId::from_path(path)
    }

    /// Order-independent encoding of the unlabeled shape, e.g. `(()(()()))`.
    pub fn canonical_shape(&self) -> String {
        fn enc(t: &FiniteTree, v: usize) -> String {
            let mut parts: Vec<String> = t.children(v).map(|c| enc(t, c)).collect();
            parts.sort();
            format!("({})", parts.concat())
        }
        enc(self, 0)
    }

    /// One line per vertex in breadth-first order:
    /// `path<TAB>total_children<TAB>is_backbone`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for v in 0..self.len() {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                self.vertex_id(v),
                self.child_count[v],
                u8::from(self.backbone[v])
            ));
        }
        out
    }

    /// Inverse of [`FiniteTree::to_text`]. Lines must list parents before
    /// children and siblings in index order.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut ids: Vec<VertexId> = Vec::new();
        let mut counts = Vec::new();
        let mut flags = Vec::new();
        for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |what: &str| Error::Parse(format!("line {}: {what}", lineno + 1));
            let mut cols = line.split('\t');
            let id: VertexId = cols.next().ok_or_else(|| bad("missing path"))?.parse()?;
            let n: u32 = cols
                .next()
                .and_then(|c| c.trim().parse().ok())
                .ok_or_else(|| bad("bad child count"))?;
            let flag = match cols.next().map(str::trim) {
                Some("1") | Some("true") => true,
                Some("0") | Some("false") => false,
                _ => return Err(bad("bad backbone flag")),
            };
            ids.push(id);
            counts.push(n);
            flags.push(flag);
        }
        if ids.first().map(|id| !id.is_root()).unwrap_or(true) {
            return Err(Error::Parse("first line must be the root".into()));
        }
        let mut builder = FiniteTreeBuilder::new(flags[0]);
        let mut index_of = std::collections::HashMap::new();
        index_of.insert(ids[0].clone(), 0usize);
        for i in 1..ids.len() {
            let parent_id = ids[i].parent().expect("non-root");
            let &p = index_of
                .get(&parent_id)
                .ok_or_else(|| Error::Parse(format!("vertex {} listed before its parent", ids[i])))?;
            let idx = builder.push(p, flags[i]);
            let expected_first = builder.tree.first_child[p] as usize;
            let offset = *ids[i].path().last().unwrap() as usize;
            if offset == 0 {
                builder.tree.first_child[p] = idx as u32;
            } else if idx != expected_first + offset {
                return Err(Error::Parse(format!("children of {parent_id} are not contiguous")));
            }
            builder.tree.child_count[p] += 1;
            index_of.insert(ids[i].clone(), idx);
        }
        let tree = builder.finish();
        for (v, &n) in counts.iter().enumerate() {
            if tree.child_count[v] != n {
                return Err(Error::Parse(format!(
                    "vertex {} declares {n} children but {} are listed",
                    ids[v], tree.child_count[v]
                )));
            }
        }
        Ok(tree)
    }
}

/// How the rejection oracle accepts a depth-truncated unconditioned tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Acceptance {
    /// Accept when generation `depth` is non-empty.
    ReachDepth,
    /// Accept with probability `1 - q^{Z_depth}`, the chance that the
    /// generation-`depth` population survives forever. The accepted
    /// truncation then has exactly the law of the conditioned tree
    /// restricted to generations `0..=depth`.
    SurvivalWeighted,
}

pub const MAX_ORACLE_DEPTH: u32 = 6;

/// Grows unconditioned trees to `depth` generations until one is accepted.
///
/// Vertices are flagged as backbone when they have a descendant in
/// generation `depth`.
pub fn sample_conditioned_rejection(
    law: &OffspringLaw,
    depth: u32,
    acceptance: Acceptance,
    rng: &mut CounterRng,
) -> Result<FiniteTree> {
    if depth > MAX_ORACLE_DEPTH {
        return Err(Error::Domain(format!(
            "oracle depth {depth} exceeds {MAX_ORACLE_DEPTH}"
        )));
    }
    let q = law.extinction_probability();
    let accept_prob = match acceptance {
        Acceptance::ReachDepth => {
            let mut s = 0.0;
            for _ in 0..depth {
                s = law.f(s);
            }
            1.0 - s
        }
        Acceptance::SurvivalWeighted => 1.0 - q,
    };
    if accept_prob < 1e-6 {
        return Err(Error::OracleInfeasible(accept_prob));
    }
    loop {
        let mut builder = FiniteTreeBuilder::new(false);
        let mut frontier = vec![0usize];
        for _ in 0..depth {
            let mut next = Vec::new();
            for &v in &frontier {
                let k = law.sample(rng.next_f64());
                let first = builder.len();
                for _ in 0..k {
                    next.push(builder.push(v, false));
                }
                builder.set_children(v, first, k);
            }
            frontier = next;
        }
        let z = frontier.len();
        let accepted = match acceptance {
            Acceptance::ReachDepth => z > 0,
            Acceptance::SurvivalWeighted => rng.next_f64() < 1.0 - q.powi(z as i32),
        };
        if accepted {
            let mut tree = builder.finish();
            for &v in &frontier {
                let mut x = v;
                while !tree.backbone[x] {
                    tree.backbone[x] = true;
                    match tree.parent(x) {
                        Some(p) => x = p,
                        None => break,
                    }
                }
            }
            return Ok(tree);
        }
    }
}

/// A trap tree with the extra vertex `ρ̄` at index 0 and its child `ρ` at index 1.
#[derive(Debug, Clone)]
pub struct TrapSample {
    pub tree: FiniteTree,
    pub censored: bool,
}

/// Samples `ρ̄ - ρ - (h-GW tree)`, aborting once more than `size_cap`
/// vertices have been created. A censored sample keeps the partial tree.
pub fn sample_trap_tree(trap_law: &OffspringLaw, rng: &mut CounterRng, size_cap: usize) -> Result<TrapSample> {
    if size_cap == 0 {
        return Err(Error::Domain("size cap must be positive".into()));
    }
    let mut builder = FiniteTreeBuilder::new(false);
    let rho = builder.push(0, false);
    builder.set_children(0, rho, 1);
    let mut frontier = vec![rho];
    let mut censored = false;
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for &v in &frontier {
            let k = trap_law.sample(rng.next_f64());
            if builder.len() + k as usize > size_cap {
                censored = true;
                break;
            }
            let first = builder.len();
            for _ in 0..k {
                next.push(builder.push(v, false));
            }
            builder.set_children(v, first, k);
        }
        if censored {
            break;
        }
        frontier = next;
    }
    Ok(TrapSample {
        tree: builder.finish(),
        censored,
    })
}

impl DerivedLaws {
    pub fn sample_trap_tree(&self, rng: &mut CounterRng, size_cap: usize) -> Result<TrapSample> {
        let trap = self
            .trap
            .as_ref()
            .ok_or_else(|| Error::Model("p_0 = 0: the law has no traps".into()))?;
        sample_trap_tree(trap, rng, size_cap)
    }
}
