//! Structural causal model generators and simulators.
//!
//! Node convention: a model over `d` covariates has `d + 1` nodes; nodes
//! `0..d` are the covariates `x_0..x_{d-1}` and node `d` is the response.
//! The graph (and the response assignment) is shared across environments;
//! covariate assignments may differ per environment.
//!
//! Specs serialize to JSON (see the repository README for the schema) so
//! benchmark instances are reproducible and shareable.

pub mod discrete;

use crate::error::{Error, Result};
use crate::gate::sigmoid;
use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Directed acyclic graph with a designated response node.
///
/// The response is always node `d` where `d` is the covariate count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dag {
    /// Covariate count; node ids run over `0..=d` with `d` the response.
    pub d: usize,
    /// Parent sets indexed by node id.
    pub parents: Vec<BTreeSet<usize>>,
    /// A topological order of the node ids (parents precede children).
    pub topological_order: Vec<usize>,
}

impl Dag {
    /// Build from parent sets, deriving a topological order.
    /// Fails if the graph has a cycle or references invalid nodes.
    pub fn new(d: usize, parents: Vec<BTreeSet<usize>>) -> Result<Self> {
        let p = d + 1;
        if parents.len() != p {
            return Err(Error::DimensionMismatch {
                context: "dag parent sets",
                expected: p,
                found: parents.len(),
            });
        }
        if parents.iter().flatten().any(|&j| j >= p) {
            return Err(Error::invalid("parent set references an invalid node"));
        }
        // Kahn's algorithm, smallest-id-first for determinism.
        let mut indeg: Vec<usize> = parents.iter().map(|s| s.len()).collect();
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); p];
        for (node, ps) in parents.iter().enumerate() {
            for &q in ps {
                children[q].push(node);
            }
        }
        let mut ready: BTreeSet<usize> = (0..p).filter(|&i| indeg[i] == 0).collect();
        let mut topo = Vec::with_capacity(p);
        while let Some(&next) = ready.iter().next() {
            ready.remove(&next);
            topo.push(next);
            for &c in &children[next] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if topo.len() != p {
            return Err(Error::invalid("graph has a cycle"));
        }
        Ok(Dag {
            d,
            parents,
            topological_order: topo,
        })
    }

    pub fn node_count(&self) -> usize {
        self.d + 1
    }

    /// Node id of the response.
    pub fn y_node(&self) -> usize {
        self.d
    }

    pub fn parents_of(&self, node: usize) -> &BTreeSet<usize> {
        &self.parents[node]
    }

    pub fn children_of(&self, node: usize) -> BTreeSet<usize> {
        (0..self.node_count())
            .filter(|&c| self.parents[c].contains(&node))
            .collect()
    }

    /// Strict ancestors of `node` (the node itself excluded).
    pub fn ancestors_of(&self, node: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let mut stack: Vec<usize> = self.parents[node].iter().copied().collect();
        while let Some(v) = stack.pop() {
            if out.insert(v) {
                stack.extend(self.parents[v].iter().copied());
            }
        }
        out
    }

    /// Strict descendants of `node`.
    pub fn descendants_of(&self, node: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let mut stack: Vec<usize> = self.children_of(node).into_iter().collect();
        while let Some(v) = stack.pop() {
            if out.insert(v) {
                stack.extend(self.children_of(v));
            }
        }
        out
    }

    /// Validate the stored topological order against the parent sets
    /// (useful after deserialization).
    pub fn validate(&self) -> Result<()> {
        let p = self.node_count();
        if self.topological_order.len() != p {
            return Err(Error::invalid("topological order has wrong length"));
        }
        let mut pos = vec![usize::MAX; p];
        for (i, &v) in self.topological_order.iter().enumerate() {
            if v >= p || pos[v] != usize::MAX {
                return Err(Error::invalid("topological order is not a permutation"));
            }
            pos[v] = i;
        }
        for (node, ps) in self.parents.iter().enumerate() {
            for &q in ps {
                if pos[q] >= pos[node] {
                    return Err(Error::invalid("parent does not precede child"));
                }
            }
        }
        Ok(())
    }
}

/// Unary link functions used by structural assignments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuncKind {
    Identity,
    Cos,
    Sin,
    SinPi,
    Sigmoid,
    Tanh,
    Relu,
}

impl FuncKind {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            FuncKind::Identity => x,
            FuncKind::Cos => x.cos(),
            FuncKind::Sin => x.sin(),
            FuncKind::SinPi => (std::f64::consts::PI * x).sin(),
            FuncKind::Sigmoid => sigmoid(x),
            FuncKind::Tanh => x.tanh(),
            FuncKind::Relu => x.max(0.0),
        }
    }
}

/// Exogenous noise law (both are mean zero).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Standard normal.
    Gaussian,
    /// Uniform on [-1.5, 1.5].
    UniformSym,
}

impl NoiseKind {
    fn draw(self, rng: &mut impl Rng) -> f64 {
        match self {
            NoiseKind::Gaussian => rng.sample(StandardNormal),
            NoiseKind::UniformSym => rng.gen_range(-1.5..1.5),
        }
    }
}

/// One additive term `coeff * func(value of parent)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub parent: usize,
    pub coeff: f64,
    pub func: FuncKind,
}

/// Structural assignment of one node in one environment.
///
/// Externally tagged on purpose: internally tagged enums buffer values
/// through serde's `Content`, which does not round-trip `f64` exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    /// `sum_k coeff_k * func_k(parent_k) + noise_coeff * eps`.
    Additive {
        terms: Vec<Term>,
        noise_coeff: f64,
        noise: NoiseKind,
    },
    /// `p0 * p1^3 + ln(1 + e^tanh(p2) + e^p3) + sin(p4) + noise_coeff * eps`
    /// over exactly five parents.
    CubeLogExpSin {
        parents: [usize; 5],
        noise_coeff: f64,
        noise: NoiseKind,
    },
}

impl Assignment {
    /// Deterministic part of the assignment given node values.
    pub fn mean(&self, values: &[f64]) -> f64 {
        match self {
            Assignment::Additive { terms, .. } => terms
                .iter()
                .map(|t| t.coeff * t.func.eval(values[t.parent]))
                .sum(),
            Assignment::CubeLogExpSin { parents, .. } => {
                let v = |i: usize| values[parents[i]];
                v(0) * v(1).powi(3)
                    + (1.0 + v(2).tanh().exp() + v(3).exp()).ln()
                    + v(4).sin()
            }
        }
    }

    pub fn parent_ids(&self) -> BTreeSet<usize> {
        match self {
            Assignment::Additive { terms, .. } => terms.iter().map(|t| t.parent).collect(),
            Assignment::CubeLogExpSin { parents, .. } => parents.iter().copied().collect(),
        }
    }

    fn noise(&self) -> (f64, NoiseKind) {
        match self {
            Assignment::Additive {
                noise_coeff, noise, ..
            }
            | Assignment::CubeLogExpSin {
                noise_coeff, noise, ..
            } => (*noise_coeff, *noise),
        }
    }
}

/// A multi-environment structural causal model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmSpec {
    pub dag: Dag,
    pub env_count: usize,
    /// `assignments[env][node]`.
    pub assignments: Vec<Vec<Assignment>>,
}

impl ScmSpec {
    pub fn new(dag: Dag, assignments: Vec<Vec<Assignment>>) -> Result<Self> {
        let spec = ScmSpec {
            env_count: assignments.len(),
            dag,
            assignments,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Check shape, parent consistency, and response invariance.
    pub fn validate(&self) -> Result<()> {
        self.dag.validate()?;
        if self.env_count == 0 || self.assignments.len() != self.env_count {
            return Err(Error::invalid("assignment table does not match env count"));
        }
        let y = self.dag.y_node();
        for per_env in &self.assignments {
            if per_env.len() != self.dag.node_count() {
                return Err(Error::invalid("assignment table does not match node count"));
            }
            for (node, a) in per_env.iter().enumerate() {
                if a.parent_ids() != *self.dag.parents_of(node) {
                    return Err(Error::invalid(format!(
                        "assignment parents of node {node} disagree with the graph"
                    )));
                }
            }
        }
        // The response's regression function must be shared across
        // environments; its noise scale may vary (mean invariance only).
        let same_mean_part = |a: &Assignment, b: &Assignment| -> bool {
            match (a, b) {
                (
                    Assignment::Additive { terms: ta, .. },
                    Assignment::Additive { terms: tb, .. },
                ) => ta == tb,
                (
                    Assignment::CubeLogExpSin { parents: pa, .. },
                    Assignment::CubeLogExpSin { parents: pb, .. },
                ) => pa == pb,
                _ => false,
            }
        };
        for per_env in &self.assignments[1..] {
            if !same_mean_part(&per_env[y], &self.assignments[0][y]) {
                return Err(Error::invalid(
                    "response regression function must be identical in every environment",
                ));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dag.d
    }

    /// The invariant regression function: the deterministic part of the
    /// response assignment, evaluated on a full covariate vector.
    pub fn regression_mean(&self, x: ArrayView1<f64>) -> f64 {
        let y = self.dag.y_node();
        // Node values with the response slot unused.
        let mut values = vec![0.0; self.dag.node_count()];
        values[..self.dim()].copy_from_slice(x.as_slice().expect("contiguous covariates"));
        self.assignments[0][y].mean(&values)
    }

    /// Coefficients over covariates when the response assignment is linear;
    /// entries outside the parent set are zero.
    pub fn linear_coefficients(&self) -> Option<Vec<f64>> {
        let y = self.dag.y_node();
        match &self.assignments[0][y] {
            Assignment::Additive { terms, .. } => {
                let mut beta = vec![0.0; self.dim()];
                for t in terms {
                    if t.func != FuncKind::Identity || t.parent >= self.dim() {
                        return None;
                    }
                    beta[t.parent] = t.coeff;
                }
                Some(beta)
            }
            _ => None,
        }
    }

    /// Covariate ids of the response's parents.
    pub fn true_support(&self) -> BTreeSet<usize> {
        self.dag.parents_of(self.dag.y_node()).clone()
    }

    /// Covariate ids of the response's strict descendants.
    pub fn descendant_covariates(&self) -> BTreeSet<usize> {
        self.dag
            .descendants_of(self.dag.y_node())
            .into_iter()
            .filter(|&v| v < self.dim())
            .collect()
    }

    /// Draw `n` joint samples from environment `env`.
    ///
    /// Values are generated node by node in topological order with fresh
    /// exogenous noise per draw.
    pub fn simulate(
        &self,
        env: usize,
        n: usize,
        rng: &mut impl Rng,
    ) -> Result<(Array2<f64>, Array1<f64>)> {
        if env >= self.env_count {
            return Err(Error::invalid(format!(
                "environment {env} out of range (have {})",
                self.env_count
            )));
        }
        let p = self.dag.node_count();
        let d = self.dim();
        let mut x = Array2::<f64>::zeros((n, d));
        let mut y = Array1::<f64>::zeros(n);
        let mut values = vec![0.0; p];
        let order = self.dag.topological_order.clone();
        for i in 0..n {
            for &node in &order {
                let a = &self.assignments[env][node];
                let (nc, law) = a.noise();
                values[node] = a.mean(&values) + nc * law.draw(rng);
            }
            for j in 0..d {
                x[(i, j)] = values[j];
            }
            y[i] = values[self.dag.y_node()];
        }
        Ok((x, y))
    }
}

/// Draw a random DAG in generation order: node slot `i` (1-based, out of
/// `d + 1`) picks at most `max_parents` parents uniformly from the earlier
/// slots, and the slot `y_position` becomes the response. The response is
/// then topped up with extra parents (earlier slots) and children (later
/// slots) until the requested minima hold.
pub fn sample_random_dag(
    d: usize,
    y_position: usize,
    max_parents: usize,
    min_y_parents: usize,
    min_y_children: usize,
    rng: &mut impl Rng,
) -> Result<Dag> {
    let p = d + 1;
    if y_position == 0 || y_position > p {
        return Err(Error::invalid("y_position out of range"));
    }
    if y_position - 1 < min_y_parents || p - y_position < min_y_children {
        return Err(Error::invalid(
            "y_position leaves no room for the requested parent/child minima",
        ));
    }
    // node id of generation slot z (1-based)
    let node_of = |z: usize| -> usize {
        use std::cmp::Ordering::*;
        match z.cmp(&y_position) {
            Less => z - 1,
            Equal => d,
            Greater => z - 2,
        }
    };
    let mut parents: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); p];
    for z in 1..=p {
        let avail = z - 1;
        let k = rng.gen_range(0..=max_parents.min(avail));
        if k > 0 {
            let chosen = sample_indices(rng, avail, k);
            let set: BTreeSet<usize> = chosen.into_iter().map(|idx| node_of(idx + 1)).collect();
            parents[node_of(z)] = set;
        }
    }
    let y = d;
    // Top up parents of the response.
    while parents[y].len() < min_y_parents {
        let candidates: Vec<usize> = (1..y_position)
            .map(node_of)
            .filter(|v| !parents[y].contains(v))
            .collect();
        let pick = candidates[rng.gen_range(0..candidates.len())];
        parents[y].insert(pick);
    }
    // Top up children of the response.
    let mut child_count = (1..=p)
        .map(node_of)
        .filter(|&v| parents[v].contains(&y))
        .count();
    while child_count < min_y_children {
        let candidates: Vec<usize> = (y_position + 1..=p)
            .map(node_of)
            .filter(|&v| !parents[v].contains(&y))
            .collect();
        let pick = candidates[rng.gen_range(0..candidates.len())];
        parents[pick].insert(y);
        child_count += 1;
    }
    Dag::new(d, parents)
}

fn draw_coeff(rng: &mut impl Rng) -> f64 {
    rng.gen_range(-1.5..1.5)
}

/// Coefficient in [-1.5, 1.5] with magnitude at least 0.5.
fn draw_noise_coeff(rng: &mut impl Rng) -> f64 {
    loop {
        let c = draw_coeff(rng);
        if c.abs() >= 0.5 {
            return c;
        }
    }
}

const LINEAR_BENCH_FUNCS: [FuncKind; 5] = [
    FuncKind::Cos,
    FuncKind::Sin,
    FuncKind::SinPi,
    FuncKind::Identity,
    FuncKind::Sigmoid,
];

/// Two-environment linear benchmark at `d` in {15, 70}.
///
/// All covariate assignments are redrawn independently per environment
/// (link functions and coefficients); the response is linear in its parents
/// with coefficients shared across environments. At `d = 70` the response
/// noise scale differs across environments; at `d = 15` it is shared.
pub fn build_linear_benchmark(d: usize, rng: &mut impl Rng) -> Result<ScmSpec> {
    let (y_position, minima) = match d {
        70 => (36, 5),
        15 => (8, 3),
        _ => return Err(Error::invalid("linear benchmark is defined for d in {15, 70}")),
    };
    let shared_y_noise = d == 15;
    let dag = sample_random_dag(d, y_position, 4, minima, minima, rng)?;
    let y = dag.y_node();
    let env_count = 2;
    let mut assignments: Vec<Vec<Assignment>> =
        (0..env_count).map(|_| Vec::with_capacity(dag.node_count())).collect();

    // Response coefficients, shared across environments.
    let y_terms: Vec<Term> = dag
        .parents_of(y)
        .iter()
        .map(|&parent| Term {
            parent,
            coeff: draw_coeff(rng),
            func: FuncKind::Identity,
        })
        .collect();
    let y_noise_shared = draw_noise_coeff(rng);
    let y_noise_per_env: Vec<f64> = if shared_y_noise {
        vec![y_noise_shared; env_count]
    } else {
        // Redraw until the scales genuinely differ.
        let mut second = draw_noise_coeff(rng);
        while second == y_noise_shared {
            second = draw_noise_coeff(rng);
        }
        vec![y_noise_shared, second]
    };

    for node in 0..dag.node_count() {
        if node == y {
            for (e, env_assignments) in assignments.iter_mut().enumerate() {
                env_assignments.push(Assignment::Additive {
                    terms: y_terms.clone(),
                    noise_coeff: y_noise_per_env[e],
                    noise: NoiseKind::Gaussian,
                });
            }
        } else {
            for env_assignments in assignments.iter_mut() {
                let terms = dag
                    .parents_of(node)
                    .iter()
                    .map(|&parent| Term {
                        parent,
                        coeff: draw_coeff(rng),
                        func: LINEAR_BENCH_FUNCS[rng.gen_range(0..LINEAR_BENCH_FUNCS.len())],
                    })
                    .collect();
                env_assignments.push(Assignment::Additive {
                    terms,
                    noise_coeff: draw_noise_coeff(rng),
                    noise: NoiseKind::Gaussian,
                });
            }
        }
    }
    ScmSpec::new(dag, assignments)
}

const NONLINEAR_CHILD_FUNCS: [FuncKind; 3] = [FuncKind::Tanh, FuncKind::Sin, FuncKind::Cos];
const NONLINEAR_RESPONSE_FUNCS: [FuncKind; 4] = [
    FuncKind::Tanh,
    FuncKind::Sin,
    FuncKind::Relu,
    FuncKind::Identity,
];

/// Two-environment nonlinear benchmark with 26 covariates.
///
/// Covariates 0..5 are exogenous uniform roots and the only parents of the
/// response; covariates 5..9 are response children through `tanh` with
/// environment-dependent gain ([-1.5, 1.5] in env 0, [-5, 5] in env 1);
/// covariates 9..26 are wired to random parents among the first eight
/// covariates. `variant` selects the response: 1 is a random additive
/// function, 2 the fixed product/log-exp/sine composition.
pub fn build_nonlinear_benchmark(variant: usize, rng: &mut impl Rng) -> Result<ScmSpec> {
    if variant != 1 && variant != 2 {
        return Err(Error::invalid("nonlinear benchmark variant must be 1 or 2"));
    }
    let d = 26;
    let y = d;
    let env_count = 2;
    let mut parents: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); d + 1];
    parents[y] = (0..5).collect();
    for p in parents.iter_mut().take(9).skip(5) {
        *p = BTreeSet::from([y]);
    }
    for p in parents.iter_mut().take(26).skip(9) {
        let k = rng.gen_range(1..=4usize);
        let chosen = sample_indices(rng, 8, k);
        *p = chosen.into_iter().collect();
    }
    let dag = Dag::new(d, parents)?;

    let response = if variant == 2 {
        Assignment::CubeLogExpSin {
            parents: [0, 1, 2, 3, 4],
            noise_coeff: 1.0,
            noise: NoiseKind::Gaussian,
        }
    } else {
        let terms = (0..5)
            .map(|parent| Term {
                parent,
                coeff: 1.0,
                func: NONLINEAR_RESPONSE_FUNCS[rng.gen_range(0..NONLINEAR_RESPONSE_FUNCS.len())],
            })
            .collect();
        Assignment::Additive {
            terms,
            noise_coeff: 1.0,
            noise: NoiseKind::Gaussian,
        }
    };

    let mut assignments: Vec<Vec<Assignment>> =
        (0..env_count).map(|_| Vec::with_capacity(d + 1)).collect();
    for node in 0..=d {
        for (e, env_assignments) in assignments.iter_mut().enumerate() {
            let a = if node == y {
                response.clone()
            } else if node < 5 {
                // Exogenous roots, identical across environments.
                Assignment::Additive {
                    terms: Vec::new(),
                    noise_coeff: 1.0,
                    noise: NoiseKind::UniformSym,
                }
            } else if node < 9 {
                let gain = if e == 0 {
                    rng.gen_range(-1.5..1.5)
                } else {
                    rng.gen_range(-5.0..5.0)
                };
                Assignment::Additive {
                    terms: vec![Term {
                        parent: y,
                        coeff: gain,
                        func: FuncKind::Tanh,
                    }],
                    noise_coeff: rng.gen_range(1.0..1.5),
                    noise: NoiseKind::UniformSym,
                }
            } else {
                let terms = dag
                    .parents_of(node)
                    .iter()
                    .map(|&parent| Term {
                        parent,
                        coeff: rng.gen_range(-1.5..1.5),
                        func: NONLINEAR_CHILD_FUNCS[rng.gen_range(0..NONLINEAR_CHILD_FUNCS.len())],
                    })
                    .collect();
                Assignment::Additive {
                    terms,
                    noise_coeff: rng.gen_range(2.0..3.0),
                    noise: NoiseKind::UniformSym,
                }
            };
            env_assignments.push(a);
        }
    }
    ScmSpec::new(dag, assignments)
}

/// The canonical three-node fixture with a single heterogeneous child
/// edge: `x0 <- sqrt(0.5) eps`, `y <- x0 + sqrt(0.5) eps`, and
/// `x1 <- s_e * y + eps` where only the gain `s_e` varies per environment.
pub fn reverse_child_scm(s: [f64; 2]) -> ScmSpec {
    let d = 2;
    let y = d;
    let parents = vec![
        BTreeSet::new(),
        BTreeSet::from([y]),
        BTreeSet::from([0usize]),
    ];
    let dag = Dag::new(d, parents).unwrap();
    let root = Assignment::Additive {
        terms: Vec::new(),
        noise_coeff: 0.5_f64.sqrt(),
        noise: NoiseKind::Gaussian,
    };
    let response = Assignment::Additive {
        terms: vec![Term {
            parent: 0,
            coeff: 1.0,
            func: FuncKind::Identity,
        }],
        noise_coeff: 0.5_f64.sqrt(),
        noise: NoiseKind::Gaussian,
    };
    let child = |gain: f64| Assignment::Additive {
        terms: vec![Term {
            parent: y,
            coeff: gain,
            func: FuncKind::Identity,
        }],
        noise_coeff: 1.0,
        noise: NoiseKind::Gaussian,
    };
    let assignments = vec![
        vec![root.clone(), child(s[0]), response.clone()],
        vec![root, child(s[1]), response],
    ];
    ScmSpec::new(dag, assignments).unwrap()
}
