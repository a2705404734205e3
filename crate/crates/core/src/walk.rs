//! Biased walks, the backbone projection and regeneration structure.
//!
//! From a non-root vertex with `c` children the walk moves to the parent with
//! probability `1/(1 + βc)` and to each child with probability `β/(1 + βc)`.
//! From the root it moves to a uniformly chosen child, without bias.

use crate::error::{Error, Result};
use crate::rng::{fold, CounterRng};
use crate::tree::{FiniteTree, Node, TreeHandle, VertexId};

const WALK_TAG: u64 = 0x5741_4C4B;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Parent,
    Child(u32),
}

/// One transition of the kernel driven by a single uniform `u` in `[0, 1)`.
///
/// A root must have at least one child.
#[inline]
pub fn kernel_move(children: u32, is_root: bool, beta: f64, u: f64) -> Move {
    if is_root {
        debug_assert!(children > 0, "isolated root");
        let i = (u * f64::from(children)) as u32;
        return Move::Child(i.min(children - 1));
    }
    if children == 0 {
        return Move::Parent;
    }
    let scaled = u * (1.0 + beta * f64::from(children));
    if scaled < 1.0 {
        Move::Parent
    } else {
        let i = ((scaled - 1.0) / beta) as u32;
        Move::Child(i.min(children - 1))
    }
}

/// Transition probabilities out of a vertex: `(to parent, to each child)`.
pub fn kernel_probabilities(children: u32, is_root: bool, beta: f64) -> (f64, f64) {
    if is_root {
        (0.0, 1.0 / f64::from(children))
    } else {
        let z = 1.0 + beta * f64::from(children);
        (1.0 / z, beta / z)
    }
}

/// Single step on a conditioned tree from the vertex `v`.
pub fn step(tree: &TreeHandle, v: &VertexId, beta: f64, u: f64) -> Result<VertexId> {
    let rec = tree.expand(v)?;
    Ok(match kernel_move(rec.total_children, v.is_root(), beta, u) {
        Move::Parent => v.parent().expect("non-root vertex has a parent"),
        Move::Child(i) => v.child(i),
    })
}

/// A walker on a [`TreeHandle`], holding the current root-to-vertex path.
#[derive(Debug, Clone)]
pub struct Walker<'a> {
    tree: &'a TreeHandle,
    beta: f64,
    rng: CounterRng,
    stack: Vec<Node>,
    path: Vec<u32>,
}

impl<'a> Walker<'a> {
    pub fn new(tree: &'a TreeHandle, beta: f64, walk_seed: u64) -> Self {
        Self {
            tree,
            beta,
            rng: CounterRng::new(fold(walk_seed, WALK_TAG)),
            stack: vec![tree.root()],
            path: Vec::new(),
        }
    }

    #[inline]
    pub fn current(&self) -> &Node {
        self.stack.last().expect("walker stack never empties")
    }

    #[inline]
    pub fn level(&self) -> u32 {
        (self.stack.len() - 1) as u32
    }

    #[inline]
    pub fn on_backbone(&self) -> bool {
        self.current().record.is_backbone
    }

    pub fn vertex(&self) -> VertexId {
        VertexId::from_path(self.path.clone())
    }

    #[inline]
    pub fn step(&mut self) -> Move {
        let node = *self.current();
        let mv = kernel_move(
            node.record.total_children,
            self.stack.len() == 1,
            self.beta,
            self.rng.next_f64(),
        );
        match mv {
            Move::Parent => {
                self.stack.pop();
                self.path.pop();
            }
            Move::Child(i) => {
                self.stack.push(self.tree.child_unchecked(&node, i));
                self.path.push(i);
            }
        }
        mv
    }

    /// Advances `n` steps, returning the final level.
    pub fn advance(&mut self, n: u64) -> u32 {
        for _ in 0..n {
            self.step();
        }
        self.level()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WalkOptions {
    /// Keep the move sequence so that vertex addresses can be reconstructed.
    pub record_moves: bool,
}

/// Path of a walk started at the root.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub beta: f64,
    pub tree_seed: u64,
    pub walk_seed: u64,
    pub levels: Vec<u32>,
    pub on_backbone: Vec<bool>,
    /// `-1` for a step to the parent, otherwise the child index taken.
    pub moves: Option<Vec<i32>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.levels.len() - 1
    }

    /// Vertex addresses `X_0, X_1, ...`; requires recorded moves.
    pub fn vertices(&self) -> Option<Vec<VertexId>> {
        let moves = self.moves.as_ref()?;
        let mut path: Vec<u32> = Vec::new();
        let mut out = Vec::with_capacity(moves.len() + 1);
        out.push(VertexId::root());
        for &m in moves {
            if m < 0 {
                path.pop();
            } else {
                path.push(m as u32);
            }
            out.push(VertexId::from_path(path.clone()));
        }
        Some(out)
    }

    /// `t<TAB>level<TAB>flag` per step, flag 1 on the backbone.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.levels.len() * 10);
        for (t, (&l, &b)) in self.levels.iter().zip(&self.on_backbone).enumerate() {
            out.push_str(&format!("{t}\t{l}\t{}\n", u8::from(b)));
        }
        out
    }
}

pub fn run_walk(tree: &TreeHandle, beta: f64, n_steps: usize, walk_seed: u64, opts: WalkOptions) -> Trajectory {
    let mut walker = Walker::new(tree, beta, walk_seed);
    let mut levels = Vec::with_capacity(n_steps + 1);
    let mut on_backbone = Vec::with_capacity(n_steps + 1);
    let mut moves = opts.record_moves.then(|| Vec::with_capacity(n_steps));
    levels.push(0);
    on_backbone.push(true);
    for _ in 0..n_steps {
        let mv = walker.step();
        levels.push(walker.level());
        on_backbone.push(walker.on_backbone());
        if let Some(m) = moves.as_mut() {
            m.push(match mv {
                Move::Parent => -1,
                Move::Child(i) => i as i32,
            });
        }
    }
    Trajectory {
        beta,
        tree_seed: tree.seed(),
        walk_seed,
        levels,
        on_backbone,
        moves,
    }
}

/// The walk watched only along backbone-to-backbone steps.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneTrace {
    /// `r(0) = 0` and `r(n)` the n-th time both `X_{k-1}` and `X_k` are on the backbone.
    pub r: Vec<usize>,
    /// `|Y_n| = |X_{r(n)}|`.
    pub levels: Vec<u32>,
}

pub fn project_backbone(traj: &Trajectory) -> Result<BackboneTrace> {
    if traj.is_empty() || !traj.on_backbone[0] {
        return Err(Error::MalformedTrajectory("walk must start on the backbone".into()));
    }
    let mut r = vec![0];
    let mut levels = vec![traj.levels[0]];
    for k in 1..traj.len() {
        if traj.on_backbone[k] && traj.on_backbone[k - 1] {
            r.push(k);
            levels.push(traj.levels[k]);
        }
    }
    Ok(BackboneTrace { r, levels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Increment {
    /// `ζ^X_{k+1} - ζ^X_k`
    pub dt: u64,
    /// `|X_{ζ_{k+1}}| - |X_{ζ_k}|`
    pub dlevel: i64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegenerationRecord {
    /// Confirmed backbone regeneration indices `ζ^Y_1 < ζ^Y_2 < ...`.
    pub zeta_y: Vec<usize>,
    /// Levels at the confirmed indices.
    pub levels: Vec<i64>,
    /// Walk times `ζ^X_k`; filled by [`map_to_x`].
    pub zeta_x: Vec<usize>,
    /// Consecutive increments from `ζ_1` on; filled by [`map_to_x`].
    pub increments: Vec<Increment>,
    /// Last candidate that still satisfies the definition at the horizon.
    pub unconfirmed_tail: Option<usize>,
}

/// Online scan for indices `k >= 1` with `|Y_j| < |Y_k| <= |Y_l|` for all
/// `j < k <= l` within the horizon.
///
/// Candidates are fresh record levels; a candidate dies as soon as the path
/// drops below it. The survivors at the end satisfy the definition inside
/// the horizon, and the last of them is held back as unconfirmed because
/// nothing beyond the horizon has been seen.
pub fn detect_regenerations<T: Copy + Into<i64>>(levels: &[T]) -> Result<RegenerationRecord> {
    let mut candidates: Vec<(usize, i64)> = Vec::new();
    let Some(first) = levels.first() else {
        return Ok(RegenerationRecord::default());
    };
    let mut max = (*first).into();
    let mut prev = max;
    for (k, &l) in levels.iter().enumerate().skip(1) {
        let l: i64 = l.into();
        if (l - prev).abs() != 1 {
            return Err(Error::MalformedTrajectory(format!(
                "level jumps from {prev} to {l} at index {k}"
            )));
        }
        prev = l;
        while candidates.last().is_some_and(|&(_, c)| c > l) {
            candidates.pop();
        }
        if l > max {
            max = l;
            candidates.push((k, l));
        }
    }
    let tail = candidates.pop().map(|(k, _)| k);
    Ok(RegenerationRecord {
        zeta_y: candidates.iter().map(|&(k, _)| k).collect(),
        levels: candidates.iter().map(|&(_, l)| l).collect(),
        zeta_x: Vec::new(),
        increments: Vec::new(),
        unconfirmed_tail: tail,
    })
}

/// Translates backbone regeneration indices to walk times and assembles the
/// increments between consecutive confirmed regenerations (the block before
/// `ζ_1` is not included).
///
/// A regeneration vertex is at a fresh record level of `Y`, so its first
/// visit by `X` is the backbone step that `Y` records: `ζ^X_k = r(ζ^Y_k)`.
pub fn map_to_x(record: &RegenerationRecord, trace: &BackboneTrace) -> RegenerationRecord {
    let zeta_x: Vec<usize> = record.zeta_y.iter().map(|&k| trace.r[k]).collect();
    let increments = zeta_x
        .windows(2)
        .zip(record.levels.windows(2))
        .map(|(t, l)| Increment {
            dt: (t[1] - t[0]) as u64,
            dlevel: l[1] - l[0],
        })
        .collect();
    RegenerationRecord {
        zeta_x,
        increments,
        ..record.clone()
    }
}

/// Regeneration record of a trajectory, with walk times filled in.
pub fn regenerations(traj: &Trajectory) -> Result<RegenerationRecord> {
    let trace = project_backbone(traj)?;
    let rec = detect_regenerations(&trace.levels)?;
    Ok(map_to_x(&rec, &trace))
}

/// Splits `r(k+1) - r(k)` into trap excursions from `Y_k` plus one backbone step.
/// Returns the excursion durations.
pub fn excursion_decomposition(traj: &Trajectory, trace: &BackboneTrace, k: usize) -> Result<Vec<usize>> {
    if k + 1 >= trace.r.len() {
        return Err(Error::IncompleteExcursion(k));
    }
    let (start, end) = (trace.r[k], trace.r[k + 1]);
    let mut gammas = Vec::new();
    let mut left_at = None;
    for t in start..end {
        match (traj.on_backbone[t], traj.on_backbone[t + 1], left_at) {
            (true, false, None) => left_at = Some(t),
            (false, true, Some(s)) => {
                gammas.push(t + 1 - s);
                left_at = None;
            }
            _ => {}
        }
    }
    Ok(gammas)
}

/// First return time to `ρ̄` (vertex 0) for a walk started there, censored at `time_cap`.
pub fn trap_return_time(trap: &FiniteTree, beta: f64, rng: &mut CounterRng, time_cap: u64) -> (u64, bool) {
    let mut v = 0usize;
    for t in 1..=time_cap {
        let mv = kernel_move(trap.child_count(v), v == 0, beta, rng.next_f64());
        v = match mv {
            Move::Parent => trap.parent(v).expect("non-root vertex has a parent"),
            Move::Child(i) => trap.child(v, i),
        };
        if v == 0 {
            return (t, false);
        }
    }
    (time_cap, true)
}

/// Trap excursions from the root between consecutive departures into the backbone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RootExcursions {
    pub counts: Vec<u32>,
    /// `Z_1`
    pub root_children: u32,
    /// `Z_1^g`
    pub root_backbone_children: u32,
}

impl RootExcursions {
    /// `p_ex = (Z_1 - Z_1^g) / Z_1`, the chance a step from the root enters a trap.
    pub fn p_ex(&self) -> f64 {
        f64::from(self.root_children - self.root_backbone_children) / f64::from(self.root_children)
    }
}

pub fn count_root_excursions(tree: &TreeHandle, traj: &Trajectory) -> RootExcursions {
    let root = tree.root().record;
    let mut counts = Vec::new();
    let mut w = 0u32;
    for t in 0..traj.len().saturating_sub(1) {
        if traj.levels[t] == 0 {
            if traj.on_backbone[t + 1] {
                counts.push(w);
                w = 0;
            } else {
                w += 1;
            }
        }
    }
    RootExcursions {
        counts,
        root_children: root.total_children,
        root_backbone_children: root.backbone_children,
    }
}
