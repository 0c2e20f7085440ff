//! Graph-based identification and its brute-force verification.
//!
//! Given the shared causal graph and the set of intervened covariates, the
//! invariant (quasi-causal) covariate set is computable purely graphically:
//! the response's parents, its children untouched by interventions anywhere
//! upstream within the child set, and those children's other parents
//! ([`pragmatic_direct_causes`]). Intervening on every "root child"
//! ([`minimal_intervention_set`]) collapses that set to the true parents.
//!
//! Everything here is double-checked against exact enumeration on
//! finite-support environments: [`brute_force_max_invariant_set`] searches
//! all covariate subsets for the maximum invariant one, and
//! [`check_identification_condition`] verifies that every biased subset
//! exhibits cross-environment heterogeneity. [`ident_sweep`] runs the whole
//! comparison over random discrete models and reports disagreements with
//! faithfulness-violation witnesses.

use crate::error::{Error, Result};
use crate::scm::discrete::{build_discrete_scm, CellKey, CellStat, DiscreteEnvs, DiscreteScmConfig};
use crate::scm::Dag;
use crate::seed;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};

/// Default absolute tolerance for equality of exact conditional
/// expectations (rational-probability models are exact up to floating
/// summation over at most a few thousand cells).
pub const EXACT_TOL: f64 = 1e-9;

/// A causal graph together with the covariates hit by interventions; the
/// environment indicator enters as an extra root node pointing at them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedDag {
    pub dag: Dag,
    /// Intervened covariate ids (the response may not appear here).
    pub intervened: BTreeSet<usize>,
}

impl AugmentedDag {
    pub fn new(dag: Dag, intervened: BTreeSet<usize>) -> Result<Self> {
        if intervened.iter().any(|&j| j >= dag.d) {
            return Err(Error::invalid(
                "intervention set must contain covariate ids only",
            ));
        }
        Ok(AugmentedDag { dag, intervened })
    }

    /// Node id of the environment indicator.
    pub fn env_node(&self) -> usize {
        self.dag.node_count()
    }

    pub fn node_count(&self) -> usize {
        self.dag.node_count() + 1
    }

    fn parents(&self, v: usize) -> Vec<usize> {
        if v == self.env_node() {
            Vec::new()
        } else {
            let mut p: Vec<usize> = self.dag.parents_of(v).iter().copied().collect();
            if v < self.dag.d && self.intervened.contains(&v) {
                p.push(self.env_node());
            }
            p
        }
    }

    fn children(&self, v: usize) -> Vec<usize> {
        if v == self.env_node() {
            self.intervened.iter().copied().collect()
        } else {
            self.dag.children_of(v).into_iter().collect()
        }
    }
}

/// d-separation of `a` and `b` given `c` in the augmented graph, by
/// reachability over directed trails (chains and forks block on
/// conditioned nodes, colliders open when the collider or one of its
/// descendants is conditioned).
pub fn d_separated(
    graph: &AugmentedDag,
    a: &BTreeSet<usize>,
    b: &BTreeSet<usize>,
    c: &BTreeSet<usize>,
) -> Result<bool> {
    let n = graph.node_count();
    for set in [a, b, c] {
        if set.iter().any(|&v| v >= n) {
            return Err(Error::invalid("node id out of range"));
        }
    }
    if !a.is_disjoint(b) || !a.is_disjoint(c) || !b.is_disjoint(c) {
        return Err(Error::invalid("node sets must be disjoint"));
    }
    // Ancestor closure of the conditioning set (for collider opening).
    let mut anc_c: Vec<bool> = vec![false; n];
    let mut queue: VecDeque<usize> = c.iter().copied().collect();
    while let Some(v) = queue.pop_front() {
        if !anc_c[v] {
            anc_c[v] = true;
            queue.extend(graph.parents(v));
        }
    }
    let in_c = |v: usize| c.contains(&v);

    // Trail states: the direction the trail used to enter the node.
    #[derive(Clone, Copy, PartialEq)]
    enum Dir {
        FromParent, // entered v along an edge parent -> v
        FromChild,  // entered v along an edge v <- child (moving up)
    }
    let mut visited = vec![[false; 2]; n];
    let mut stack: Vec<(usize, Dir)> = a.iter().map(|&v| (v, Dir::FromChild)).collect();
    while let Some((v, dir)) = stack.pop() {
        let slot = match dir {
            Dir::FromParent => 0,
            Dir::FromChild => 1,
        };
        if visited[v][slot] {
            continue;
        }
        visited[v][slot] = true;
        if b.contains(&v) {
            return Ok(false);
        }
        match dir {
            Dir::FromChild => {
                if !in_c(v) {
                    for p in graph.parents(v) {
                        stack.push((p, Dir::FromChild));
                    }
                    for ch in graph.children(v) {
                        stack.push((ch, Dir::FromParent));
                    }
                }
            }
            Dir::FromParent => {
                if !in_c(v) {
                    for ch in graph.children(v) {
                        stack.push((ch, Dir::FromParent));
                    }
                }
                if anc_c[v] {
                    for p in graph.parents(v) {
                        stack.push((p, Dir::FromChild));
                    }
                }
            }
        }
    }
    Ok(true)
}

/// The invariant covariate set implied by the graph and the interventions:
/// parents of the response, unaffected children, and those children's other
/// parents. A child counts as unaffected when neither it nor any of its
/// ancestors within the child set is intervened.
pub fn pragmatic_direct_causes(dag: &Dag, intervened: &BTreeSet<usize>) -> Result<BTreeSet<usize>> {
    if intervened.iter().any(|&j| j >= dag.d) {
        return Err(Error::invalid(
            "intervention set must contain covariate ids only",
        ));
    }
    let y = dag.y_node();
    let children = dag.children_of(y);
    let unaffected: BTreeSet<usize> = children
        .iter()
        .copied()
        .filter(|&c| {
            let mut closure = dag.ancestors_of(c);
            closure.insert(c);
            closure
                .intersection(&children)
                .all(|j| !intervened.contains(j))
        })
        .collect();
    let mut out: BTreeSet<usize> = dag.parents_of(y).clone();
    for &c in &unaffected {
        out.insert(c);
        out.extend(dag.parents_of(c).iter().copied().filter(|&p| p != y));
    }
    Ok(out)
}

/// Children of the response with no ancestor that is itself a child of the
/// response; intervening on all of them recovers the true parents.
pub fn minimal_intervention_set(dag: &Dag) -> BTreeSet<usize> {
    let y = dag.y_node();
    let children = dag.children_of(y);
    children
        .iter()
        .copied()
        .filter(|&c| dag.ancestors_of(c).is_disjoint(&children))
        .collect()
}

/// Conditional-expectation tables of every covariate subset of an exact
/// multi-environment model, cached for the brute-force oracles.
struct SubsetTables<'a> {
    envs: &'a DiscreteEnvs,
    per_env: Vec<Vec<BTreeMap<CellKey, CellStat>>>,
    pooled: Vec<BTreeMap<CellKey, CellStat>>,
}

fn support_of(mask: u32, d: usize) -> Vec<usize> {
    (0..d).filter(|&j| mask & (1 << j) != 0).collect()
}

impl<'a> SubsetTables<'a> {
    fn build(envs: &'a DiscreteEnvs) -> Self {
        let d = envs.dim;
        let n_masks = 1usize << d;
        let mut per_env = Vec::with_capacity(n_masks);
        let mut pooled = Vec::with_capacity(n_masks);
        for mask in 0..n_masks as u32 {
            let support = support_of(mask, d);
            per_env.push(
                (0..envs.env_count())
                    .map(|e| envs.conditional_means(e, &support))
                    .collect(),
            );
            pooled.push(envs.pooled_conditional_means(&support));
        }
        SubsetTables {
            envs,
            per_env,
            pooled,
        }
    }

    /// Invariance of a subset: every environment's conditional expectation
    /// agrees with the pooled one on all of its positive-probability cells.
    fn is_invariant(&self, mask: u32, tol: f64) -> bool {
        let pooled = &self.pooled[mask as usize];
        self.per_env[mask as usize].iter().all(|env_map| {
            env_map
                .iter()
                .all(|(k, stat)| (stat.mean - pooled[k].mean).abs() <= tol)
        })
    }

    /// Pointwise equality (over all positive-mass atoms) of the pooled
    /// regressions on two subsets.
    fn pooled_functions_equal(&self, mask_a: u32, mask_b: u32, tol: f64) -> bool {
        let d = self.envs.dim;
        let sup_a = support_of(mask_a, d);
        let sup_b = support_of(mask_b, d);
        let ta = &self.pooled[mask_a as usize];
        let tb = &self.pooled[mask_b as usize];
        for env in &self.envs.envs {
            for atom in env {
                let va = ta[&DiscreteEnvs::cell_key(&atom.x, &sup_a)].mean;
                let vb = tb[&DiscreteEnvs::cell_key(&atom.x, &sup_b)].mean;
                if (va - vb).abs() > tol {
                    return false;
                }
            }
        }
        true
    }
}

/// Result of the exhaustive search for a maximum invariant set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaxInvariantSet {
    Set(BTreeSet<usize>),
    /// No invariant set dominates all others, or the smallest dominating
    /// set is not unique.
    NoUniqueMaximum,
}

/// Enumerate all covariate subsets of an exact model and return the
/// smallest invariant set whose pooled regression absorbs every other
/// invariant set (the pooled regression on `S ∪ S'` equals the one on `S`
/// pointwise). Supersets padded with irrelevant covariates satisfy the same
/// property, so the smallest such set is the canonical representative; if
/// several sets of minimal size qualify, no unique maximum exists.
pub fn brute_force_max_invariant_set(envs: &DiscreteEnvs, tol: f64) -> MaxInvariantSet {
    let d = envs.dim;
    assert!(d <= 16, "exhaustive search needs a small covariate count");
    let tables = SubsetTables::build(envs);
    let invariant: Vec<u32> = (0..(1u32 << d))
        .filter(|&m| tables.is_invariant(m, tol))
        .collect();
    let mut maximal: Vec<u32> = Vec::new();
    'outer: for &s in &invariant {
        for &other in &invariant {
            let union = s | other;
            if !tables.pooled_functions_equal(union, s, tol) {
                continue 'outer;
            }
        }
        maximal.push(s);
    }
    let Some(&best) = maximal.iter().min_by_key(|&&m| (m.count_ones(), m)) else {
        return MaxInvariantSet::NoUniqueMaximum;
    };
    let ties = maximal
        .iter()
        .filter(|&&m| m.count_ones() == best.count_ones())
        .count();
    if ties > 1 {
        return MaxInvariantSet::NoUniqueMaximum;
    }
    MaxInvariantSet::Set(support_of(best, d).into_iter().collect())
}

/// Outcome of the heterogeneity check backing identification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentCheck {
    pub holds: bool,
    /// Subsets whose pooled regression is biased yet whose conditional
    /// expectations coincide across all environment pairs.
    pub witnesses: Vec<BTreeSet<usize>>,
}

/// Verify, by enumeration, that every covariate subset whose pooled
/// regression is biased (squared distance between the invariant regression
/// and the pooled regression on `S ∪ S*` above `bias_tol` under the pooled
/// law) shows cross-environment heterogeneity: for some environment pair,
/// the cells where the conditional expectations differ by more than
/// `het_tol` carry joint (min-measure) mass above `het_mass_tol`.
///
/// Exact rational models use `het_mass_tol = 0` (any positive-mass
/// disagreement counts); discretized fixtures need a small positive mass
/// floor so grid jitter on near-null cells does not masquerade as
/// heterogeneity.
pub fn check_identification_condition(
    envs: &DiscreteEnvs,
    s_star: &BTreeSet<usize>,
    bias_tol: f64,
    het_tol: f64,
    het_mass_tol: f64,
) -> IdentCheck {
    let d = envs.dim;
    assert!(d <= 16, "exhaustive check needs a small covariate count");
    let star_mask: u32 = s_star.iter().fold(0, |m, &j| m | (1 << j));
    let tables = SubsetTables::build(envs);
    let env_weight = 1.0 / envs.env_count() as f64;
    let mut witnesses = Vec::new();
    for mask in 0..(1u32 << d) {
        let union = mask | star_mask;
        // Exact bias of the pooled regression on the union against the
        // invariant regression on S*.
        let sup_star = support_of(star_mask, d);
        let sup_union = support_of(union, d);
        let t_star = &tables.pooled[star_mask as usize];
        let t_union = &tables.pooled[union as usize];
        let mut bias = 0.0;
        for env in &envs.envs {
            for atom in env {
                let m_star = t_star[&DiscreteEnvs::cell_key(&atom.x, &sup_star)].mean;
                let m_u = t_union[&DiscreteEnvs::cell_key(&atom.x, &sup_union)].mean;
                bias += env_weight * atom.p * (m_star - m_u) * (m_star - m_u);
            }
        }
        if bias <= bias_tol {
            continue;
        }
        // Need heterogeneity of the conditional expectations on S itself:
        // disagreeing cells must carry positive min-measure.
        let per_env = &tables.per_env[mask as usize];
        let mut heterogeneous = false;
        'pairs: for e in 0..envs.env_count() {
            for e2 in (e + 1)..envs.env_count() {
                let mut mass = 0.0;
                for (k, stat) in &per_env[e] {
                    if let Some(stat2) = per_env[e2].get(k) {
                        if (stat.mean - stat2.mean).abs() > het_tol {
                            mass += stat.prob.min(stat2.prob);
                        }
                    }
                }
                if mass > het_mass_tol {
                    heterogeneous = true;
                    break 'pairs;
                }
            }
        }
        if !heterogeneous {
            witnesses.push(support_of(mask, d).into_iter().collect());
        }
    }
    IdentCheck {
        holds: witnesses.is_empty(),
        witnesses,
    }
}

/// Subsets that are numerically invariant although the augmented graph
/// d-connects the environment node to the response given them: the
/// signature of a degenerate (faithfulness-violating) parameterization.
pub fn faithfulness_witnesses(
    envs: &DiscreteEnvs,
    graph: &AugmentedDag,
    tol: f64,
) -> Result<Vec<BTreeSet<usize>>> {
    let d = envs.dim;
    let tables = SubsetTables::build(envs);
    let y = graph.dag.y_node();
    let env_node = graph.env_node();
    let mut out = Vec::new();
    for mask in 0..(1u32 << d) {
        let cond: BTreeSet<usize> = support_of(mask, d).into_iter().collect();
        let separated = d_separated(
            graph,
            &BTreeSet::from([env_node]),
            &BTreeSet::from([y]),
            &cond,
        )?;
        let invariant = tables.is_invariant(mask, tol);
        if invariant && !separated {
            out.push(cond);
        }
    }
    Ok(out)
}

/// Per-graph record of an identification sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphOutcome {
    pub index: usize,
    pub sub_seed: u64,
    pub intervened: BTreeSet<usize>,
    pub graphical: BTreeSet<usize>,
    pub brute_force: MaxInvariantSet,
    pub agrees: Option<bool>,
    /// Present when the two routes disagree or no maximum exists.
    pub faithfulness_witnesses: Vec<BTreeSet<usize>>,
}

/// Aggregate report of [`ident_sweep`], serializable to JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub graphs: usize,
    pub seed: u64,
    pub with_maximum: usize,
    pub agreements: usize,
    pub outcomes: Vec<GraphOutcome>,
}

impl SweepReport {
    pub fn agreement_rate(&self) -> f64 {
        if self.with_maximum == 0 {
            return 1.0;
        }
        self.agreements as f64 / self.with_maximum as f64
    }
}

/// Generate `graphs` random discrete models and compare the graphical
/// invariant set against the brute-force maximum on each.
pub fn ident_sweep(
    graphs: usize,
    max_nodes: usize,
    max_parents: usize,
    env_count: usize,
    base_seed: u64,
) -> Result<SweepReport> {
    if !(3..=8).contains(&max_nodes) {
        return Err(Error::invalid("max_nodes must lie in 3..=8"));
    }
    let mut outcomes = Vec::with_capacity(graphs);
    let mut with_maximum = 0usize;
    let mut agreements = 0usize;
    for index in 0..graphs {
        let sub_seed = seed::derive(base_seed, "ident-sweep", index as u64);
        let mut rng = seed::rng(base_seed, "ident-sweep", index as u64);
        let cfg = DiscreteScmConfig {
            node_count: 2 + (index % (max_nodes - 1)),
            max_support: 3,
            env_count,
            max_parents,
            intervention_prob: 0.4,
        };
        let scm = build_discrete_scm(cfg, &mut rng)?;
        let envs = scm.enumerate();
        let graphical = pragmatic_direct_causes(&scm.dag, &scm.intervened)?;
        let brute_force = brute_force_max_invariant_set(&envs, EXACT_TOL);
        let agrees = match &brute_force {
            MaxInvariantSet::Set(s) => Some(*s == graphical),
            MaxInvariantSet::NoUniqueMaximum => None,
        };
        match agrees {
            Some(true) => {
                with_maximum += 1;
                agreements += 1;
            }
            Some(false) => with_maximum += 1,
            None => {}
        }
        let needs_witnesses = !matches!(agrees, Some(true));
        let faith = if needs_witnesses {
            let aug = AugmentedDag::new(scm.dag.clone(), scm.intervened.clone())?;
            faithfulness_witnesses(&envs, &aug, EXACT_TOL)?
        } else {
            Vec::new()
        };
        outcomes.push(GraphOutcome {
            index,
            sub_seed,
            intervened: scm.intervened.clone(),
            graphical,
            brute_force,
            agrees,
            faithfulness_witnesses: faith,
        });
    }
    Ok(SweepReport {
        graphs,
        seed: base_seed,
        with_maximum,
        agreements,
        outcomes,
    })
}

/// Test fixture: a twelve-node graph (eleven covariates plus the response)
/// with parents {0, 1, 2}, children {5, 6, 7}, a child-of-child chain
/// 6 -> 8 -> 7, a common sink 10, an upstream confounder 3 of two parents,
/// and an isolated covariate 9.
pub fn example_dag_11() -> Dag {
    let y = 11usize;
    let mut parents: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); 12];
    parents[y] = BTreeSet::from([0, 1, 2]);
    parents[1] = BTreeSet::from([3]);
    parents[2] = BTreeSet::from([3]);
    parents[5] = BTreeSet::from([4, y]);
    parents[6] = BTreeSet::from([y, 2]);
    parents[7] = BTreeSet::from([y, 8]);
    parents[8] = BTreeSet::from([6]);
    parents[10] = BTreeSet::from([6, 7]);
    Dag::new(11, parents).unwrap()
}
