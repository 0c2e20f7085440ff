//! Exact finite-support models: the oracle substrate for identification
//! checks.
//!
//! Two representations live here. [`DiscreteScm`] stores per-node,
//! per-environment conditional probability tables over small supports and
//! can enumerate its exact joint. [`DiscreteEnvs`] is the enumerated form —
//! one weighted atom list per environment — which is what the brute-force
//! oracles consume. Conditional expectations on atoms are exact up to
//! floating summation, so equality tests can use tight tolerances.

use crate::error::{Error, Result};
use crate::scm::Dag;
use crate::stats::{normal_pdf, normal_quantile};
use rand::Rng;
use std::collections::{BTreeMap, BTreeSet};

/// One support point of a joint distribution: covariates, response, mass.
#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub x: Vec<f64>,
    pub y: f64,
    pub p: f64,
}

/// Exact finite-support joint distributions, one per environment.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteEnvs {
    pub dim: usize,
    pub envs: Vec<Vec<Atom>>,
}

/// Cell identity for a covariate subset: the exact bit patterns of the
/// selected coordinates.
pub type CellKey = Vec<u64>;

/// Conditional mean and probability of one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellStat {
    pub mean: f64,
    pub prob: f64,
}

impl DiscreteEnvs {
    pub fn env_count(&self) -> usize {
        self.envs.len()
    }

    pub fn cell_key(x: &[f64], support: &[usize]) -> CellKey {
        support.iter().map(|&j| x[j].to_bits()).collect()
    }

    /// Per-cell conditional means `E[Y | X_S = cell]` in one environment.
    /// Only positive-probability cells appear.
    pub fn conditional_means(&self, env: usize, support: &[usize]) -> BTreeMap<CellKey, CellStat> {
        let mut acc: BTreeMap<CellKey, (f64, f64)> = BTreeMap::new();
        for a in &self.envs[env] {
            let k = Self::cell_key(&a.x, support);
            let e = acc.entry(k).or_insert((0.0, 0.0));
            e.0 += a.p;
            e.1 += a.p * a.y;
        }
        acc.into_iter()
            .map(|(k, (p, py))| {
                (
                    k,
                    CellStat {
                        mean: py / p,
                        prob: p,
                    },
                )
            })
            .collect()
    }

    /// Pooled conditional means under the equal-weight mixture of all
    /// environments.
    pub fn pooled_conditional_means(&self, support: &[usize]) -> BTreeMap<CellKey, CellStat> {
        let w = 1.0 / self.env_count() as f64;
        let mut acc: BTreeMap<CellKey, (f64, f64)> = BTreeMap::new();
        for env in &self.envs {
            for a in env {
                let k = Self::cell_key(&a.x, support);
                let e = acc.entry(k).or_insert((0.0, 0.0));
                e.0 += w * a.p;
                e.1 += w * a.p * a.y;
            }
        }
        acc.into_iter()
            .map(|(k, (p, py))| {
                (
                    k,
                    CellStat {
                        mean: py / p,
                        prob: p,
                    },
                )
            })
            .collect()
    }

    /// Total mass per environment (sanity: should be 1).
    pub fn masses(&self) -> Vec<f64> {
        self.envs
            .iter()
            .map(|env| env.iter().map(|a| a.p).sum())
            .collect()
    }
}

/// A conditional probability table for one node in one environment.
///
/// Rows are parent configurations in mixed-radix order (parents sorted
/// ascending, earlier parent = faster digit); columns follow the node's
/// support order.
#[derive(Debug, Clone, PartialEq)]
pub struct Cpt {
    pub table: Vec<Vec<f64>>,
}

/// A multi-environment SCM over small finite supports.
#[derive(Debug, Clone)]
pub struct DiscreteScm {
    pub dag: Dag,
    /// Support values per node.
    pub supports: Vec<Vec<f64>>,
    /// `cpts[env][node]`.
    pub cpts: Vec<Vec<Cpt>>,
    /// Covariate ids whose tables differ from environment 0.
    pub intervened: BTreeSet<usize>,
}

impl DiscreteScm {
    pub fn env_count(&self) -> usize {
        self.cpts.len()
    }

    fn parent_config_index(&self, node: usize, value_idx: &[usize]) -> usize {
        let mut idx = 0usize;
        let mut stride = 1usize;
        for &par in self.dag.parents_of(node) {
            idx += value_idx[par] * stride;
            stride *= self.supports[par].len();
        }
        idx
    }

    /// Enumerate the exact joint of every environment.
    pub fn enumerate(&self) -> DiscreteEnvs {
        let p = self.dag.node_count();
        let d = self.dag.d;
        let sizes: Vec<usize> = self.supports.iter().map(|s| s.len()).collect();
        let mut envs = Vec::with_capacity(self.env_count());
        for env in 0..self.env_count() {
            let mut atoms = Vec::new();
            let mut value_idx = vec![0usize; p];
            loop {
                let mut prob = 1.0;
                for &node in &self.dag.topological_order {
                    let cfg = self.parent_config_index(node, &value_idx);
                    prob *= self.cpts[env][node].table[cfg][value_idx[node]];
                }
                if prob > 0.0 {
                    let x: Vec<f64> = (0..d).map(|j| self.supports[j][value_idx[j]]).collect();
                    let y = self.supports[d][value_idx[d]];
                    atoms.push(Atom { x, y, p: prob });
                }
                // advance the mixed-radix counter
                let mut carry = 0usize;
                loop {
                    value_idx[carry] += 1;
                    if value_idx[carry] < sizes[carry] {
                        break;
                    }
                    value_idx[carry] = 0;
                    carry += 1;
                    if carry == p {
                        break;
                    }
                }
                if carry == p {
                    break;
                }
            }
            envs.push(atoms);
        }
        DiscreteEnvs { dim: d, envs }
    }

    /// The invariant regression function `E[Y | X_pa(Y)]` from the response
    /// table (identical in every environment by construction).
    pub fn response_mean(&self, parent_value_idx: &[usize]) -> f64 {
        let y = self.dag.y_node();
        let cfg = self.parent_config_index(y, parent_value_idx);
        self.cpts[0][y].table[cfg]
            .iter()
            .zip(&self.supports[y])
            .map(|(&p, &v)| p * v)
            .sum()
    }
}

/// Denominator of the rational probability grid used by random tables.
const PROB_DENOMINATOR: u64 = 97;

/// A random composition of [`PROB_DENOMINATOR`] into `k` positive parts,
/// normalized to probabilities.
fn random_distribution(k: usize, rng: &mut impl Rng) -> Vec<f64> {
    debug_assert!(k >= 1 && (k as u64) <= PROB_DENOMINATOR);
    // k - 1 distinct cut points in 1..PROB_DENOMINATOR
    let mut cuts = BTreeSet::new();
    while cuts.len() < k - 1 {
        cuts.insert(rng.gen_range(1..PROB_DENOMINATOR));
    }
    let mut parts = Vec::with_capacity(k);
    let mut prev = 0u64;
    for &c in &cuts {
        parts.push(c - prev);
        prev = c;
    }
    parts.push(PROB_DENOMINATOR - prev);
    parts
        .into_iter()
        .map(|v| v as f64 / PROB_DENOMINATOR as f64)
        .collect()
}

fn random_cpt(node: usize, dag: &Dag, sizes: &[usize], rng: &mut impl Rng) -> Cpt {
    let rows: usize = dag.parents_of(node).iter().map(|&q| sizes[q]).product();
    let table = (0..rows.max(1))
        .map(|_| random_distribution(sizes[node], rng))
        .collect();
    Cpt { table }
}

/// Parameters for [`build_discrete_scm`].
#[derive(Debug, Clone, Copy)]
pub struct DiscreteScmConfig {
    pub node_count: usize,
    pub max_support: usize,
    pub env_count: usize,
    pub max_parents: usize,
    /// Probability that a covariate joins the intervention set.
    pub intervention_prob: f64,
}

impl Default for DiscreteScmConfig {
    fn default() -> Self {
        DiscreteScmConfig {
            node_count: 6,
            max_support: 3,
            env_count: 2,
            max_parents: 3,
            intervention_prob: 0.4,
        }
    }
}

/// Random small SCM with rational tables.
///
/// Environments beyond the first differ from environment 0 exactly at the
/// returned intervention set; redraws that leave an intervened table
/// numerically identical to an earlier environment's are rejected and
/// resampled, which keeps exact-coincidence degeneracies out of the sweep.
pub fn build_discrete_scm(cfg: DiscreteScmConfig, rng: &mut impl Rng) -> Result<DiscreteScm> {
    if cfg.node_count < 2 || cfg.node_count > 8 {
        return Err(Error::invalid("node_count must be between 2 and 8"));
    }
    if cfg.max_support < 2 || cfg.max_support > 3 {
        return Err(Error::invalid("max_support must be 2 or 3"));
    }
    if cfg.env_count == 0 {
        return Err(Error::invalid("need at least one environment"));
    }
    let d = cfg.node_count - 1;
    let y_position = rng.gen_range(1..=cfg.node_count);
    let dag = super::sample_random_dag(d, y_position, cfg.max_parents, 0, 0, rng)?;
    let sizes: Vec<usize> = (0..cfg.node_count)
        .map(|_| rng.gen_range(2..=cfg.max_support))
        .collect();
    let supports: Vec<Vec<f64>> = sizes
        .iter()
        .map(|&k| (0..k).map(|v| v as f64).collect())
        .collect();

    let mut intervened = BTreeSet::new();
    for j in 0..d {
        if rng.gen_bool(cfg.intervention_prob) {
            intervened.insert(j);
        }
    }

    let base: Vec<Cpt> = (0..cfg.node_count)
        .map(|node| random_cpt(node, &dag, &sizes, rng))
        .collect();
    let mut cpts = vec![base.clone()];
    for _ in 1..cfg.env_count {
        let mut env = base.clone();
        for &j in &intervened {
            loop {
                let fresh = random_cpt(j, &dag, &sizes, rng);
                if cpts.iter().all(|prev| prev[j] != fresh) {
                    env[j] = fresh;
                    break;
                }
            }
        }
        cpts.push(env);
    }
    Ok(DiscreteScm {
        dag,
        supports,
        cpts,
        intervened,
    })
}

/// Equiprobable normal grid: each of `grid` bins contributes its
/// conditional mean, `grid * (pdf(lo) - pdf(hi))`.
fn normal_grid(grid: usize) -> Vec<f64> {
    let mut pts = Vec::with_capacity(grid);
    for i in 0..grid {
        let lo = if i == 0 {
            f64::NEG_INFINITY
        } else {
            normal_quantile(i as f64 / grid as f64)
        };
        let hi = if i + 1 == grid {
            f64::INFINITY
        } else {
            normal_quantile((i + 1) as f64 / grid as f64)
        };
        let pdf_lo = if lo.is_finite() { normal_pdf(lo) } else { 0.0 };
        let pdf_hi = if hi.is_finite() { normal_pdf(hi) } else { 0.0 };
        pts.push(grid as f64 * (pdf_lo - pdf_hi));
    }
    pts
}

/// Discretization of the three-node heterogeneous-child fixture
/// (`reverse_child_scm`) onto exact atoms.
///
/// The upstream noises are replaced by `grid`-point equiprobable normal
/// grids, which keeps the `(x0, y)` marginal bit-identical across
/// environments. The child value `s_e * y + u` uses a finer
/// `child_grid`-point noise grid and is binned onto a fixed grid of width
/// `bin_width` covering `[-range, range]` so that both environments share
/// cells; atoms carry the bin midpoint. `range` should cover the full
/// reachable child support, otherwise clamped boundary bins mix distant
/// values.
pub fn reverse_child_discrete(
    s: [f64; 2],
    grid: usize,
    bin_width: f64,
    range: f64,
) -> (DiscreteEnvs, Dag) {
    let upstream = normal_grid(grid);
    let child_noise = normal_grid(8 * grid);
    let w_up = 1.0 / grid as f64;
    let w_child = 1.0 / (8 * grid) as f64;
    let n_bins = (2.0 * range / bin_width).ceil() as i64;
    let bin_of = |v: f64| -> i64 { (((v + range) / bin_width).floor() as i64).clamp(0, n_bins - 1) };
    let mid_of = |b: i64| -> f64 { -range + (b as f64 + 0.5) * bin_width };

    let mut envs = Vec::with_capacity(2);
    for &gain in &s {
        let mut acc: BTreeMap<(u64, u64, i64), f64> = BTreeMap::new();
        for &u1 in &upstream {
            let x0 = 0.5_f64.sqrt() * u1;
            for &u3 in &upstream {
                let y = x0 + 0.5_f64.sqrt() * u3;
                for &u2 in &child_noise {
                    let bin = bin_of(gain * y + u2);
                    *acc.entry((x0.to_bits(), y.to_bits(), bin)).or_insert(0.0) +=
                        w_up * w_up * w_child;
                }
            }
        }
        let atoms = acc
            .into_iter()
            .map(|((x0, y, bin), p)| Atom {
                x: vec![f64::from_bits(x0), mid_of(bin)],
                y: f64::from_bits(y),
                p,
            })
            .collect();
        envs.push(atoms);
    }
    let dag = super::reverse_child_scm(s).dag;
    (DiscreteEnvs { dim: 2, envs }, dag)
}
