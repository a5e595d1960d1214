//! Training-support construction with controlled coverage, plus the
//! compositional and connected predicates over the module-sharing graph.
//!
//! Vertices are module masks; two masks are adjacent iff they share at least
//! one active module. A support is *compositional* when every module appears
//! in some training mask and *connected* when the sharing graph has a single
//! component.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::Stream;
use crate::taskfam::{enumerate_masks, Mask};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportKind {
    Random,
    Balanced,
    NonCompositional,
    Disconnected,
    Popular,
    Unpopular,
}

impl SupportKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "random" => SupportKind::Random,
            "balanced" => SupportKind::Balanced,
            "non_compositional" => SupportKind::NonCompositional,
            "disconnected" => SupportKind::Disconnected,
            "popular" => SupportKind::Popular,
            "unpopular" => SupportKind::Unpopular,
            other => return Err(Error::Config(format!("unknown support kind {other:?}"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            SupportKind::Random => "random",
            SupportKind::Balanced => "balanced",
            SupportKind::NonCompositional => "non_compositional",
            SupportKind::Disconnected => "disconnected",
            SupportKind::Popular => "popular",
            SupportKind::Unpopular => "unpopular",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SupportSpec {
    pub kind: SupportKind,
    /// Fraction of tasks excluded from training, strictly in (0, 1).
    pub holdout_fraction: f64,
    #[serde(default = "default_budget")]
    pub resample_budget: usize,
}

fn default_budget() -> usize {
    10_000
}

impl Default for SupportSpec {
    fn default() -> Self {
        Self {
            kind: SupportKind::Random,
            holdout_fraction: 0.25,
            resample_budget: default_budget(),
        }
    }
}

impl SupportSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Config(format!(
                "holdout_fraction {} must lie strictly between 0 and 1",
                self.holdout_fraction
            )));
        }
        if self.resample_budget == 0 {
            return Err(Error::Config("resample_budget must be positive".into()));
        }
        Ok(())
    }
}

/// The training support. Edges are implicit: masks sharing an active module
/// are adjacent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportGraph {
    pub vertices: Vec<Mask>,
}

impl SupportGraph {
    pub fn new(mut vertices: Vec<Mask>) -> Self {
        vertices.sort();
        vertices.dedup();
        Self { vertices }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }
}

/// A built support: the training graph, the held-out masks, and constructor
/// metadata worth reporting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupportBuild {
    pub graph: SupportGraph,
    pub heldout: Vec<Mask>,
    pub kind: SupportKind,
    /// Module excluded by the non-compositional constructor.
    pub excluded_module: Option<usize>,
    /// Module halves chosen by the disconnected constructor.
    pub halves: Option<(Vec<usize>, Vec<usize>)>,
    /// Popular/unpopular module set when applicable.
    pub special_modules: Option<Vec<usize>>,
}

/// True iff every module index appears in at least one vertex.
pub fn is_compositional(graph: &SupportGraph, module_count: usize) -> bool {
    let mut seen = vec![false; module_count];
    for v in &graph.vertices {
        for m in v.active() {
            seen[m] = true;
        }
    }
    seen.iter().all(|&s| s)
}

/// How many vertices contain each module.
pub fn module_frequencies(graph: &SupportGraph, module_count: usize) -> Vec<usize> {
    let mut freq = vec![0usize; module_count];
    for v in &graph.vertices {
        for m in v.active() {
            freq[m] += 1;
        }
    }
    freq
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            let root = self.find(self.parent[x]);
            self.parent[x] = root;
        }
        self.parent[x]
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Partition of the vertices under the shared-active-module relation,
/// via union-find keyed by module index.
pub fn connected_components(graph: &SupportGraph) -> Vec<Vec<Mask>> {
    let n = graph.vertices.len();
    if n == 0 {
        return Vec::new();
    }
    let mut uf = UnionFind::new(n);
    let module_count = graph.vertices[0].len();
    for m in 0..module_count {
        let mut first: Option<usize> = None;
        for (i, v) in graph.vertices.iter().enumerate() {
            if v.contains(m) {
                match first {
                    None => first = Some(i),
                    Some(f) => uf.union(f, i),
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<Mask>> = Default::default();
    for i in 0..n {
        let root = uf.find(i);
        groups.entry(root).or_default().push(graph.vertices[i]);
    }
    groups.into_values().collect()
}

pub fn is_connected(graph: &SupportGraph) -> bool {
    connected_components(graph).len() == 1
}

/// Build a training support and its held-out complement.
///
/// The training-set size targets `ceil((1 - holdout_fraction) * total)`;
/// restricted kinds (non-compositional, disconnected) may fall short when the
/// constructor's own exclusion rule leaves fewer masks available.
pub fn build_support(
    spec: &SupportSpec,
    module_count: usize,
    max_active: usize,
    rng: &mut Stream,
) -> Result<SupportBuild> {
    spec.validate()?;
    let all = enumerate_masks(module_count, max_active)?;
    let total = all.len();
    let target = (((1.0 - spec.holdout_fraction) * total as f64).ceil() as usize).max(1);
    if target > total {
        return Err(Error::Infeasible(format!(
            "target {target} exceeds total {total}"
        )));
    }

    match spec.kind {
        SupportKind::Random => build_random(spec, &all, target, module_count, rng),
        SupportKind::Balanced => build_balanced(spec, &all, target, module_count, rng),
        SupportKind::NonCompositional => build_non_compositional(&all, module_count, rng),
        SupportKind::Disconnected => {
            build_disconnected(spec, &all, target, module_count, max_active, rng)
        }
        SupportKind::Popular => build_popular(spec, &all, target, module_count, rng),
        SupportKind::Unpopular => build_unpopular(spec, &all, target, module_count, rng),
    }
}

fn complement(all: &[Mask], training: &[Mask]) -> Vec<Mask> {
    let chosen: std::collections::HashSet<Mask> = training.iter().copied().collect();
    all.iter().filter(|m| !chosen.contains(m)).copied().collect()
}

fn finish(
    all: &[Mask],
    training: Vec<Mask>,
    kind: SupportKind,
    excluded_module: Option<usize>,
    halves: Option<(Vec<usize>, Vec<usize>)>,
    special_modules: Option<Vec<usize>>,
) -> SupportBuild {
    let heldout = complement(all, &training);
    SupportBuild {
        graph: SupportGraph::new(training),
        heldout,
        kind,
        excluded_module,
        halves,
        special_modules,
    }
}

fn build_random(
    spec: &SupportSpec,
    all: &[Mask],
    target: usize,
    module_count: usize,
    rng: &mut Stream,
) -> Result<SupportBuild> {
    for _ in 0..spec.resample_budget {
        let mut pool = all.to_vec();
        pool.shuffle(rng);
        pool.truncate(target);
        let graph = SupportGraph::new(pool.clone());
        if is_compositional(&graph, module_count) && is_connected(&graph) {
            return Ok(finish(all, pool, SupportKind::Random, None, None, None));
        }
    }
    Err(Error::BudgetExhausted(
        "no compositional connected random subset found".into(),
    ))
}

/// Greedy frequency equalization: repeatedly pick the unused mask whose module
/// counts are lowest, then locally swap vertices to shave off remaining
/// imbalance.
fn build_balanced(
    spec: &SupportSpec,
    all: &[Mask],
    target: usize,
    module_count: usize,
    rng: &mut Stream,
) -> Result<SupportBuild> {
    for _ in 0..spec.resample_budget {
        let mut pool = all.to_vec();
        pool.shuffle(rng);
        let mut freq = vec![0usize; module_count];
        let mut chosen: Vec<Mask> = Vec::with_capacity(target);
        let mut used = vec![false; pool.len()];
        for _ in 0..target {
            let mut best: Option<(usize, (usize, usize))> = None;
            for (i, cand) in pool.iter().enumerate() {
                if used[i] {
                    continue;
                }
                let sum: usize = cand.active().map(|m| freq[m]).sum();
                let peak: usize = cand.active().map(|m| freq[m]).max().unwrap_or(0);
                let score = (sum, peak);
                if best.map_or(true, |(_, s)| score < s) {
                    best = Some((i, score));
                }
            }
            let (i, _) = best.expect("target <= pool size");
            used[i] = true;
            for m in pool[i].active() {
                freq[m] += 1;
            }
            chosen.push(pool[i]);
        }
        swap_repair(&mut chosen, &mut freq, &pool, &mut used);
        let graph = SupportGraph::new(chosen.clone());
        if is_compositional(&graph, module_count) && is_connected(&graph) {
            return Ok(finish(all, chosen, SupportKind::Balanced, None, None, None));
        }
    }
    Err(Error::BudgetExhausted(
        "no balanced compositional connected subset found".into(),
    ))
}

/// Exchange chosen vertices against the pool while a swap strictly reduces
/// the max-min frequency spread.
fn swap_repair(chosen: &mut Vec<Mask>, freq: &mut [usize], pool: &[Mask], used: &mut [bool]) {
    let spread = |f: &[usize]| {
        let hi = *f.iter().max().unwrap();
        let lo = *f.iter().min().unwrap();
        hi - lo
    };
    for _ in 0..4 * chosen.len() {
        if spread(freq) <= 1 {
            break;
        }
        let mut improved = false;
        'outer: for ci in 0..chosen.len() {
            for (pi, cand) in pool.iter().enumerate() {
                if used[pi] {
                    continue;
                }
                let mut f2 = freq.to_vec();
                for m in chosen[ci].active() {
                    f2[m] -= 1;
                }
                for m in cand.active() {
                    f2[m] += 1;
                }
                if spread(&f2) < spread(freq) {
                    // Find the pool slot of the outgoing mask to release it.
                    let out = chosen[ci];
                    if let Some(oi) = pool.iter().position(|&p| p == out) {
                        used[oi] = false;
                    }
                    used[pi] = true;
                    chosen[ci] = *cand;
                    freq.copy_from_slice(&f2);
                    improved = true;
                    break 'outer;
                }
            }
        }
        if !improved {
            break;
        }
    }
}

/// Hold out every task containing one random fixed module.
fn build_non_compositional(
    all: &[Mask],
    module_count: usize,
    rng: &mut Stream,
) -> Result<SupportBuild> {
    let excluded = rng.gen_range(0..module_count);
    let training: Vec<Mask> = all.iter().filter(|m| !m.contains(excluded)).copied().collect();
    if training.is_empty() {
        return Err(Error::Infeasible(
            "excluding a module leaves no training masks".into(),
        ));
    }
    Ok(finish(
        all,
        training,
        SupportKind::NonCompositional,
        Some(excluded),
        None,
        None,
    ))
}

/// Split the modules into two disjoint halves and train only on masks that
/// stay within one half. Both halves must be populated, so the sharing graph
/// has at least two components while still covering every module.
fn build_disconnected(
    spec: &SupportSpec,
    all: &[Mask],
    target: usize,
    module_count: usize,
    max_active: usize,
    rng: &mut Stream,
) -> Result<SupportBuild> {
    if module_count < 2 * max_active {
        return Err(Error::Infeasible(format!(
            "disconnected support needs module_count >= 2 * max_active, got {module_count} < {}",
            2 * max_active
        )));
    }
    for _ in 0..spec.resample_budget {
        let mut order: Vec<usize> = (0..module_count).collect();
        order.shuffle(rng);
        let half_a: Vec<usize> = order[..module_count / 2].to_vec();
        let half_b: Vec<usize> = order[module_count / 2..].to_vec();
        let in_half = |mask: &Mask, half: &[usize]| mask.active().all(|m| half.contains(&m));
        let mut pool: Vec<Mask> = all
            .iter()
            .filter(|m| in_half(m, &half_a) || in_half(m, &half_b))
            .copied()
            .collect();
        pool.shuffle(rng);
        pool.truncate(target.min(pool.len()));
        let graph = SupportGraph::new(pool.clone());
        if is_compositional(&graph, module_count) && connected_components(&graph).len() >= 2 {
            return Ok(finish(
                all,
                pool,
                SupportKind::Disconnected,
                None,
                Some((half_a, half_b)),
                None,
            ));
        }
    }
    Err(Error::BudgetExhausted(
        "no compositional disconnected subset found".into(),
    ))
}

/// Masks entirely within the complement of a module set.
fn count_within(all: &[Mask], excluded: &[usize]) -> usize {
    all.iter()
        .filter(|m| m.active().all(|i| !excluded.contains(&i)))
        .count()
}

/// Keep only masks touching a popular set of size chosen to meet the holdout
/// fraction; when inexact, one non-popular module receives extra vertices.
fn build_popular(
    spec: &SupportSpec,
    all: &[Mask],
    target: usize,
    module_count: usize,
    rng: &mut Stream,
) -> Result<SupportBuild> {
    for _ in 0..spec.resample_budget {
        let mut order: Vec<usize> = (0..module_count).collect();
        order.shuffle(rng);
        // Largest popular-set size whose induced support stays within target.
        let mut chosen_p = None;
        for p in (1..module_count).rev() {
            let popular = &order[..p];
            let included = all.len() - count_within(all, popular);
            if included <= target {
                chosen_p = Some(p);
                break;
            }
        }
        let p = match chosen_p {
            Some(p) => p,
            None => 1, // even one popular module overshoots; accept the excess
        };
        let popular: Vec<usize> = order[..p].to_vec();
        let mut training: Vec<Mask> = all
            .iter()
            .filter(|m| m.active().any(|i| popular.contains(&i)))
            .copied()
            .collect();
        // Top up with vertices of one fixed non-popular module.
        if training.len() < target && p < module_count {
            let extra_module = order[p];
            let mut extras: Vec<Mask> = all
                .iter()
                .filter(|m| m.contains(extra_module) && m.active().all(|i| !popular.contains(&i)))
                .copied()
                .collect();
            extras.shuffle(rng);
            extras.truncate(target - training.len());
            training.extend(extras);
        }
        let graph = SupportGraph::new(training.clone());
        if is_compositional(&graph, module_count) && is_connected(&graph) {
            return Ok(finish(
                all,
                training,
                SupportKind::Popular,
                None,
                None,
                Some(popular),
            ));
        }
    }
    Err(Error::BudgetExhausted(
        "no compositional connected popular subset found".into(),
    ))
}

/// Exclude masks touching an unpopular set, then seed each unpopular module
/// with exactly one vertex; when inexact, one unpopular module receives extra
/// vertices.
fn build_unpopular(
    spec: &SupportSpec,
    all: &[Mask],
    target: usize,
    module_count: usize,
    rng: &mut Stream,
) -> Result<SupportBuild> {
    for _ in 0..spec.resample_budget {
        let mut order: Vec<usize> = (0..module_count).collect();
        order.shuffle(rng);
        // Smallest unpopular-set size whose induced support fits the target.
        let mut chosen_u = None;
        for u in 1..module_count {
            let unpopular = &order[..u];
            let included = count_within(all, unpopular) + u;
            if included <= target {
                chosen_u = Some(u);
                break;
            }
        }
        let u = match chosen_u {
            Some(u) => u,
            None => continue,
        };
        let unpopular: Vec<usize> = order[..u].to_vec();
        let mut training: Vec<Mask> = all
            .iter()
            .filter(|m| m.active().all(|i| !unpopular.contains(&i)))
            .copied()
            .collect();
        // One seeded vertex per unpopular module: contains that module and
        // otherwise only non-unpopular modules.
        let mut ok = true;
        for &um in &unpopular {
            let mut candidates: Vec<Mask> = all
                .iter()
                .filter(|m| {
                    m.contains(um) && m.active().all(|i| i == um || !unpopular.contains(&i))
                })
                .copied()
                .collect();
            if candidates.is_empty() {
                ok = false;
                break;
            }
            candidates.shuffle(rng);
            // A multi-module seed keeps the graph connected.
            let seed = candidates
                .iter()
                .find(|m| m.count() > 1)
                .copied()
                .unwrap_or(candidates[0]);
            training.push(seed);
        }
        if !ok {
            continue;
        }
        // Top up to the target with extra vertices of one unpopular module.
        if training.len() < target {
            let extra_module = unpopular[0];
            let have: std::collections::HashSet<Mask> = training.iter().copied().collect();
            let mut extras: Vec<Mask> = all
                .iter()
                .filter(|m| {
                    m.contains(extra_module)
                        && m.active().all(|i| i == extra_module || !unpopular.contains(&i))
                        && !have.contains(m)
                })
                .copied()
                .collect();
            extras.shuffle(rng);
            extras.truncate(target - training.len());
            training.extend(extras);
        }
        let graph = SupportGraph::new(training.clone());
        if is_compositional(&graph, module_count) && is_connected(&graph) {
            return Ok(finish(
                all,
                training,
                SupportKind::Unpopular,
                None,
                None,
                Some(unpopular),
            ));
        }
    }
    Err(Error::BudgetExhausted(
        "no compositional connected unpopular subset found".into(),
    ))
}

/// On-disk support document: bit-strings for training and held-out masks.
#[derive(Serialize, Deserialize)]
struct SupportFile {
    version: u32,
    module_count: usize,
    max_active: usize,
    kind: SupportKind,
    training: Vec<Mask>,
    heldout: Vec<Mask>,
}

pub const SUPPORT_FORMAT_VERSION: u32 = 1;

pub fn save_support(
    build: &SupportBuild,
    module_count: usize,
    max_active: usize,
    path: &Path,
) -> Result<()> {
    let doc = SupportFile {
        version: SUPPORT_FORMAT_VERSION,
        module_count,
        max_active,
        kind: build.kind,
        training: build.graph.vertices.clone(),
        heldout: build.heldout.clone(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

pub fn load_support(path: &Path) -> Result<(SupportGraph, Vec<Mask>, SupportKind)> {
    let doc: SupportFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if doc.version != SUPPORT_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported support format version {}",
            doc.version
        )));
    }
    if doc.training.is_empty() {
        return Err(Error::Format("support file has empty training set".into()));
    }
    for m in doc.training.iter().chain(doc.heldout.iter()) {
        if m.len() != doc.module_count {
            return Err(Error::Format("mask length mismatch".into()));
        }
        if m.count() == 0 || m.count() > doc.max_active {
            return Err(Error::Format("mask popcount out of range".into()));
        }
    }
    Ok((SupportGraph::new(doc.training), doc.heldout, doc.kind))
}
