//! The estimator zoo: pooled least squares, the gradient-trained gated
//! estimator, exhaustive subset search, variable selection, and refitting.
//!
//! All linear fits carry an unpenalized intercept; reported coefficient
//! vectors live in the full covariate dimension with exact zeros off the
//! support.

use crate::error::{Error, Result};
use crate::gate::GateState;
use crate::linalg::Cholesky;
use crate::mlp::{AdamParams, AdamState};
use crate::objective::{LossKind, MultiEnvDataset};
use crate::seed;
use crate::trainer::{
    predictor_block_eval, train_fair, ArchSpec, BatchRef, BlockContext, FairConfig, LinearModel,
    ModelParams, NetWorkspace, TrainedModel,
};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use std::collections::BTreeSet;

/// A fitted linear predictor over the full covariate dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// Sorted covariate ids allowed a nonzero coefficient.
    pub support: Vec<usize>,
}

impl LinearFit {
    pub fn predict(&self, x: ArrayView2<f64>) -> Array1<f64> {
        let c = ArrayView1::from(self.coefficients.as_slice());
        Array1::from_shape_fn(x.nrows(), |i| x.row(i).dot(&c) + self.intercept)
    }
}

/// Per-environment second moments of `[x, 1]` and `[x, 1]' y`, averaged
/// within the environment, plus the response second moment.
struct EnvMoments {
    axa: Array2<f64>, // (d+1) x (d+1)
    axy: Array1<f64>, // d+1
    yy: f64,
}

fn env_moments(data: &MultiEnvDataset) -> Vec<EnvMoments> {
    let d = data.dim();
    data.envs()
        .iter()
        .map(|env| {
            let n = env.y.len();
            let mut a = Array2::<f64>::zeros((n, d + 1));
            a.slice_mut(ndarray::s![.., ..d]).assign(&env.x);
            a.column_mut(d).fill(1.0);
            let inv_n = 1.0 / n as f64;
            let axa = a.t().dot(&a) * inv_n;
            let axy = a.t().dot(&env.y) * inv_n;
            let yy = env.y.dot(&env.y) * inv_n;
            EnvMoments { axa, axy, yy }
        })
        .collect()
}

fn submatrix(m: &Array2<f64>, rows: &[usize], cols: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| m[(rows[i], cols[j])])
}

fn subvector(v: &Array1<f64>, idx: &[usize]) -> Array1<f64> {
    Array1::from_shape_fn(idx.len(), |i| v[idx[i]])
}

/// Pooled least squares restricted to `support` (plus an intercept):
/// minimizes the environment-averaged squared loss.
pub fn fit_pooled_ls(data: &MultiEnvDataset, support: &[usize]) -> Result<LinearFit> {
    let d = data.dim();
    let mut sorted: Vec<usize> = support.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.iter().any(|&j| j >= d) {
        return Err(Error::invalid("support index out of range"));
    }
    let moments = env_moments(data);
    let mut idx: Vec<usize> = sorted.clone();
    idx.push(d);
    let k = idx.len();
    let mut h = Array2::<f64>::zeros((k, k));
    let mut b = Array1::<f64>::zeros(k);
    for m in &moments {
        h += &submatrix(&m.axa, &idx, &idx);
        b += &subvector(&m.axy, &idx);
    }
    let w = 1.0 / data.env_count() as f64;
    h.mapv_inplace(|v| v * w);
    b.mapv_inplace(|v| v * w);
    let theta = Cholesky::new(h.view(), "pooled normal equations")?.solve(b.view());
    let mut coefficients = vec![0.0; d];
    for (pos, &j) in sorted.iter().enumerate() {
        coefficients[j] = theta[pos];
    }
    Ok(LinearFit {
        coefficients,
        intercept: theta[k - 1],
        support: sorted,
    })
}

/// Result of the exhaustive subset search.
#[derive(Debug, Clone)]
pub struct BruteForceFit {
    pub fit: LinearFit,
    /// Objective value (pooled risk plus `gamma` times the closed-form
    /// supremum penalty) at the returned subset and coefficients.
    pub objective: f64,
    /// Subsets skipped because a per-environment Gram matrix was singular.
    pub skipped_subsets: usize,
}

/// Closed-form evaluation of one subset: minimize the pooled risk plus
/// `gamma` times the exact linear supremum penalty over coefficients
/// supported on the subset (intercept unpenalized). The problem is a
/// quadratic assembled from environment moments; returns the optimum's
/// objective value and parameters.
fn solve_subset(
    moments: &[EnvMoments],
    sorted: &[usize],
    d: usize,
    gamma: f64,
) -> Result<(f64, Array1<f64>)> {
    let mut idx: Vec<usize> = sorted.to_vec();
    idx.push(d);
    let k = idx.len();
    let s = sorted.len();
    let n_envs = moments.len() as f64;
    let mut h = Array2::<f64>::zeros((k, k));
    let mut b = Array1::<f64>::zeros(k);
    let mut constant = 0.0;
    for m in moments {
        h += &submatrix(&m.axa, &idx, &idx);
        b += &subvector(&m.axy, &idx);
        constant += m.yy;
        if s > 0 && gamma > 0.0 {
            let gram = submatrix(&m.axa, sorted, sorted);
            let chol = Cholesky::new(gram.view(), "per-environment gram")?;
            let cross = submatrix(&m.axa, sorted, &idx);
            let u = subvector(&m.axy, sorted);
            // gram^{-1} applied columnwise to `cross` and to `u`
            let mut ginv_cross = Array2::<f64>::zeros((s, k));
            for c in 0..k {
                let col = chol.solve(cross.column(c).to_owned().view());
                ginv_cross.column_mut(c).assign(&col);
            }
            let ginv_u = chol.solve(u.view());
            h += &(cross.t().dot(&ginv_cross) * gamma);
            b += &(cross.t().dot(&ginv_u) * gamma);
            constant += gamma * u.dot(&ginv_u);
        }
    }
    let w = 1.0 / n_envs;
    h.mapv_inplace(|v| v * w);
    b.mapv_inplace(|v| v * w);
    constant *= 0.5 * w;
    let theta = Cholesky::new(h.view(), "subset normal equations")?.solve(b.view());
    // quadratic objective value at the stationary point
    let objective = constant - 0.5 * b.dot(&theta);
    Ok((objective, theta))
}

/// Exhaustive search over covariate subsets (up to `max_support_size`
/// covariates, dimension capped at 20): each subset's coefficients come
/// from the closed-form normal equations of the penalized objective, and
/// the global minimizer is returned (ties break toward the
/// lexicographically smallest subset). Subsets with a singular
/// per-environment Gram matrix are skipped and counted.
pub fn fit_fair_bf(
    data: &MultiEnvDataset,
    gamma: f64,
    max_support_size: usize,
) -> Result<BruteForceFit> {
    let d = data.dim();
    if d > 20 {
        return Err(Error::invalid(
            "exhaustive subset search is limited to 20 covariates",
        ));
    }
    if gamma < 0.0 {
        return Err(Error::invalid("gamma must be nonnegative"));
    }
    let moments = env_moments(data);
    let n_masks = 1u32 << d;

    struct Candidate {
        objective: f64,
        subset: Vec<usize>,
        theta: Array1<f64>,
    }
    fn better(a: &Candidate, b: &Candidate) -> bool {
        match a.objective.partial_cmp(&b.objective) {
            Some(std::cmp::Ordering::Less) => true,
            Some(std::cmp::Ordering::Greater) => false,
            _ => a.subset < b.subset,
        }
    }

    let results: Vec<(Option<Candidate>, usize)> = (0..n_masks)
        .into_par_iter()
        .map(|mask| {
            if mask.count_ones() as usize > max_support_size {
                return (None, 0);
            }
            let sorted: Vec<usize> = (0..d).filter(|&j| mask & (1 << j) != 0).collect();
            match solve_subset(&moments, &sorted, d, gamma) {
                Ok((objective, theta)) => (
                    Some(Candidate {
                        objective,
                        subset: sorted,
                        theta,
                    }),
                    0,
                ),
                Err(_) => (None, 1),
            }
        })
        .collect();

    let mut skipped = 0usize;
    let mut best: Option<Candidate> = None;
    for (cand, sk) in results {
        skipped += sk;
        if let Some(c) = cand {
            best = match best {
                None => Some(c),
                Some(cur) => Some(if better(&c, &cur) { c } else { cur }),
            };
        }
    }
    let best = best.ok_or_else(|| Error::Numerical("every subset was singular".into()))?;
    let mut coefficients = vec![0.0; d];
    for (pos, &j) in best.subset.iter().enumerate() {
        coefficients[j] = best.theta[pos];
    }
    Ok(BruteForceFit {
        fit: LinearFit {
            coefficients,
            intercept: best.theta[best.subset.len()],
            support: best.subset,
        },
        objective: best.objective,
        skipped_subsets: skipped,
    })
}

/// Selected covariates together with the probabilities they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub selected: BTreeSet<usize>,
    pub gate_probs: Vec<f64>,
}

/// Covariates whose gate probability exceeds `threshold`.
pub fn select_variables(gate: &GateState, threshold: f64) -> Result<Selection> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("threshold must lie strictly in (0, 1)"));
    }
    let gate_probs = gate.probs();
    let selected = gate_probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > threshold)
        .map(|(j, _)| j)
        .collect();
    Ok(Selection {
        selected,
        gate_probs,
    })
}

/// Refit pooled least squares on the selected covariates (identical to
/// [`fit_pooled_ls`]; the empty set yields the pooled-mean predictor).
pub fn refit_ls(data: &MultiEnvDataset, selected: &BTreeSet<usize>) -> Result<LinearFit> {
    let support: Vec<usize> = selected.iter().copied().collect();
    fit_pooled_ls(data, &support)
}

/// Train the gated adversarial estimator (thin wrapper over
/// [`train_fair`]; the linear pipeline reports coefficients through
/// [`TrainedModel::reported_linear_coefficients`]).
pub fn fit_fair_gb(
    data: &MultiEnvDataset,
    config: &FairConfig,
    predictor_arch: &ArchSpec,
    discriminator_arch: &ArchSpec,
) -> Result<TrainedModel> {
    train_fair(config, data, predictor_arch, discriminator_arch)
}

/// Hyper-parameters for the plain pooled network regression used by the
/// refit pipeline.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MlpFitConfig {
    pub iters: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub trunc: f64,
    pub seed: u64,
    /// Validate (and possibly early-stop) every this many iterations.
    pub eval_every: u64,
}

impl MlpFitConfig {
    pub fn default_with_seed(seed: u64) -> Self {
        MlpFitConfig {
            iters: 10_000,
            lr: 1e-3,
            batch_size: 64,
            depth: 2,
            width: 128,
            trunc: 15.0,
            seed,
            eval_every: 100,
        }
    }
}

/// A pooled regression restricted to a covariate subset; predictions take
/// full-dimension inputs and select the columns internally.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFit {
    pub model: ModelParams,
    pub support: Vec<usize>,
    /// Held-out validation loss of the returned parameters (squared loss),
    /// when early stopping was active.
    pub validation_loss: Option<f64>,
}

impl PooledFit {
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let mut cols = Array2::<f64>::zeros((x.nrows(), self.support.len()));
        for (c, &j) in self.support.iter().enumerate() {
            cols.column_mut(c).assign(&x.column(j));
        }
        let mut ws = NetWorkspace::default();
        let mut out = Vec::new();
        self.model.forward(cols.view(), &mut ws, &mut out)?;
        Ok(Array1::from_vec(out))
    }
}

/// Pooled network regression on a covariate subset. Early stopping keeps
/// the parameters with the best loss on a held-out tail split of `3n/7`
/// rows per environment. An empty subset falls back to the pooled mean.
pub fn fit_pooled_mlp(
    data: &MultiEnvDataset,
    support: &[usize],
    cfg: &MlpFitConfig,
) -> Result<PooledFit> {
    let mut sorted: Vec<usize> = support.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.is_empty() {
        let fit = fit_pooled_ls(data, &[])?;
        let mut model = ModelParams::Linear(LinearModel::zeros(0, true));
        model.params_mut()[0] = fit.intercept;
        return Ok(PooledFit {
            model,
            support: sorted,
            validation_loss: None,
        });
    }
    let restricted = data.restrict(&sorted)?;
    let s = sorted.len();
    // deterministic tail split per environment
    let mut train_envs = Vec::new();
    let mut valid_envs = Vec::new();
    for env in restricted.envs() {
        let n = env.y.len();
        let n_valid = 3 * n / 7;
        if n_valid == 0 || n_valid >= n {
            return Err(Error::invalid(
                "environment too small for a validation split",
            ));
        }
        let split = n - n_valid;
        train_envs.push(crate::objective::EnvData {
            x: env.x.slice(ndarray::s![..split, ..]).to_owned(),
            y: env.y.slice(ndarray::s![..split]).to_owned(),
        });
        valid_envs.push(crate::objective::EnvData {
            x: env.x.slice(ndarray::s![split.., ..]).to_owned(),
            y: env.y.slice(ndarray::s![split..]).to_owned(),
        });
    }
    let train = MultiEnvDataset::new(train_envs)?;
    let valid = MultiEnvDataset::new(valid_envs)?;

    let arch = ArchSpec::Mlp {
        depth: cfg.depth,
        width: cfg.width,
        trunc: cfg.trunc,
    };
    let mut rng_init = seed::rng(cfg.seed, "init", 0);
    let mut rng_batch = seed::rng(cfg.seed, "minibatch", 0);
    let mut model = ModelParams::init(&arch, s, true, &mut rng_init)?;
    // inert adversaries: the block evaluator wants one per environment
    let discs: Vec<ModelParams> = (0..train.env_count())
        .map(|_| ModelParams::Linear(LinearModel::zeros(s, false)))
        .collect();
    let open_logits = vec![50.0; s];
    let uniforms = vec![0.5; s];
    let mut adam = AdamState::new(model.param_len(), AdamParams::with_lr(cfg.lr));
    let m = cfg.batch_size;
    let mut best: Option<(f64, ModelParams)> = None;

    let validation_loss = |model: &ModelParams| -> Result<f64> {
        let mut ws = NetWorkspace::default();
        let mut out = Vec::new();
        let mut acc = 0.0;
        for env in valid.envs() {
            model.forward(env.x.view(), &mut ws, &mut out)?;
            let mut env_acc = 0.0;
            for (yi, oi) in env.y.iter().zip(&out) {
                let r = yi - oi;
                env_acc += 0.5 * r * r;
            }
            acc += env_acc / env.y.len() as f64;
        }
        Ok(acc / valid.env_count() as f64)
    };

    for t in 1..=cfg.iters {
        let mut batch_x = Vec::with_capacity(train.env_count());
        let mut batch_y = Vec::with_capacity(train.env_count());
        for env in train.envs() {
            let n = env.y.len();
            let mut bx = Array2::<f64>::zeros((m, s));
            let mut by = Array1::<f64>::zeros(m);
            for i in 0..m {
                let k = rng_batch.gen_range(0..n);
                bx.row_mut(i).assign(&env.x.row(k));
                by[i] = env.y[k];
            }
            batch_x.push(bx);
            batch_y.push(by);
        }
        let batches: Vec<BatchRef> = batch_x
            .iter()
            .zip(&batch_y)
            .map(|(bx, by)| BatchRef {
                x: bx.view(),
                y: by.view(),
            })
            .collect();
        let ctx = BlockContext {
            gate_logits: &open_logits,
            tau: 0.05,
            uniforms: &uniforms,
            gamma: 0.0,
            loss: LossKind::Squared,
        };
        let (_, grads, _) = predictor_block_eval(&model, &discs, &ctx, &batches)?;
        adam.step(model.params_mut(), &grads)?;
        if t % cfg.eval_every == 0 || t == cfg.iters {
            let vl = validation_loss(&model)?;
            if !vl.is_finite() {
                return Err(Error::Numerical(format!(
                    "validation loss became non-finite at iteration {t}"
                )));
            }
            if best.as_ref().is_none_or(|(b, _)| vl < *b) {
                best = Some((vl, model.clone()));
            }
        }
    }
    let (vl, model) = best.expect("at least one validation point");
    Ok(PooledFit {
        model,
        support: sorted,
        validation_loss: Some(vl),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{linear_sup_penalty, pooled_risk, EnvData};
    use crate::scm::reverse_child_scm;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn dataset_from(x: Array2<f64>, y: Array1<f64>) -> MultiEnvDataset {
        MultiEnvDataset::new(vec![EnvData { x, y }]).unwrap()
    }

    #[test]
    fn noiseless_fit_is_exact() {
        let x = array![
            [1.0, 0.0],
            [0.0, 1.0],
            [1.0, 1.0],
            [2.0, -1.0],
            [0.5, 0.25]
        ];
        let y = Array1::from_shape_fn(5, |i| 2.0 * x[(i, 0)] - 1.5 * x[(i, 1)] + 0.7);
        let fit = fit_pooled_ls(&dataset_from(x, y), &[0, 1]).unwrap();
        assert_abs_diff_eq!(fit.coefficients[0], 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.coefficients[1], -1.5, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.intercept, 0.7, epsilon = 1e-10);
    }

    #[test]
    fn empty_support_gives_the_pooled_mean() {
        let x = array![[1.0], [2.0], [3.0]];
        let y = array![1.0, 2.0, 6.0];
        let fit = fit_pooled_ls(&dataset_from(x, y), &[]).unwrap();
        assert!(fit.coefficients.iter().all(|&c| c == 0.0));
        assert_abs_diff_eq!(fit.intercept, 3.0, epsilon = 1e-12);
    }

    /// Independent oracle: solve the pooled normal equations by explicit
    /// Gauss-Jordan inversion.
    #[test]
    fn matches_an_explicit_inversion_oracle() {
        let mut rng = seed::rng(3, "ls", 0);
        let n = 500;
        let d = 4;
        let x = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        let y = Array1::from_shape_fn(n, |i| {
            0.5 * x[(i, 0)] - 1.2 * x[(i, 2)] + 0.3 + 0.1 * rng.gen_range(-1.0..1.0)
        });
        let data = dataset_from(x.clone(), y.clone());
        let fit = fit_pooled_ls(&data, &[0, 1, 2, 3]).unwrap();

        // oracle: (A'A)^{-1} A'y via Gauss-Jordan
        let k = d + 1;
        let mut ata = vec![vec![0.0; k]; k];
        let mut aty = vec![0.0; k];
        for i in 0..n {
            let mut row = x.row(i).to_vec();
            row.push(1.0);
            for a in 0..k {
                aty[a] += row[a] * y[i];
                for b in 0..k {
                    ata[a][b] += row[a] * row[b];
                }
            }
        }
        let mut aug: Vec<Vec<f64>> = ata
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut v = r.clone();
                v.extend((0..k).map(|j| if i == j { 1.0 } else { 0.0 }));
                v
            })
            .collect();
        for col in 0..k {
            let piv = (col..k)
                .max_by(|&a, &b| aug[a][col].abs().total_cmp(&aug[b][col].abs()))
                .unwrap();
            aug.swap(col, piv);
            let p = aug[col][col];
            for v in aug[col].iter_mut() {
                *v /= p;
            }
            for r in 0..k {
                if r != col {
                    let f = aug[r][col];
                    for c in 0..2 * k {
                        aug[r][c] -= f * aug[col][c];
                    }
                }
            }
        }
        let mut theta = vec![0.0; k];
        for a in 0..k {
            for b in 0..k {
                theta[a] += aug[a][k + b] * aty[b];
            }
        }
        for j in 0..d {
            assert_abs_diff_eq!(fit.coefficients[j], theta[j], epsilon = 1e-10);
        }
        assert_abs_diff_eq!(fit.intercept, theta[d], epsilon = 1e-10);
    }

    #[test]
    fn response_scaling_scales_coefficients() {
        let mut rng = seed::rng(4, "scale", 0);
        let x = Array2::from_shape_fn((60, 3), |_| rng.gen_range(-1.0..1.0));
        let y = Array1::from_shape_fn(60, |i| x[(i, 0)] - x[(i, 1)] + rng.gen_range(-0.2..0.2));
        let c = 3.7;
        let f1 = fit_pooled_ls(&dataset_from(x.clone(), y.clone()), &[0, 1, 2]).unwrap();
        let f2 = fit_pooled_ls(&dataset_from(x, y.mapv(|v| c * v)), &[0, 1, 2]).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(c * f1.coefficients[j], f2.coefficients[j], epsilon = 1e-12);
        }
        assert_abs_diff_eq!(c * f1.intercept, f2.intercept, epsilon = 1e-12);
    }

    /// One exogenous environment: the optimal penalty is zero at every
    /// subset's least squares solution, so the search reduces to
    /// best-subset pooled least squares (the full support in-sample).
    #[test]
    fn single_exogenous_environment_reduces_to_pooled_ls() {
        let mut rng = seed::rng(5, "bf", 0);
        let x = Array2::from_shape_fn((200, 3), |_| rng.gen_range(-1.0..1.0));
        let y = Array1::from_shape_fn(200, |i| {
            0.8 * x[(i, 0)] + 0.4 * x[(i, 2)] + 0.3 * rng.gen_range(-1.0..1.0)
        });
        let data = dataset_from(x, y);
        let bf = fit_fair_bf(&data, 36.0, 3).unwrap();
        let ls = fit_pooled_ls(&data, &[0, 1, 2]).unwrap();
        assert_eq!(bf.fit.support, vec![0, 1, 2]);
        for j in 0..3 {
            assert_abs_diff_eq!(bf.fit.coefficients[j], ls.coefficients[j], epsilon = 1e-8);
        }
        // objective equals the pooled risk: the penalty vanishes at the
        // least squares solution
        let g = |xr: ArrayView1<f64>| {
            xr.dot(&ArrayView1::from(ls.coefficients.as_slice())) + ls.intercept
        };
        let risk = pooled_risk(&g, &data, LossKind::Squared).unwrap();
        assert_abs_diff_eq!(bf.objective, risk, epsilon = 1e-10);
    }

    #[test]
    fn zero_gamma_is_best_subset_least_squares() {
        let mut rng = seed::rng(6, "bf", 1);
        let x = Array2::from_shape_fn((100, 3), |_| rng.gen_range(-1.0..1.0));
        let y = Array1::from_shape_fn(100, |i| x[(i, 1)] + 0.2 * rng.gen_range(-1.0..1.0));
        let data = dataset_from(x, y);
        let bf = fit_fair_bf(&data, 0.0, 3).unwrap();
        // in-sample risk strictly decreases with support
        assert_eq!(bf.fit.support, vec![0, 1, 2]);
    }

    /// The heterogeneous-child fixture: the search must drop the child and
    /// recover the unit effect of the parent. The gain pairs keep the two
    /// environments genuinely apart (gains separated, product away from
    /// the matched-slope curve).
    #[test]
    fn heterogeneous_child_is_screened_out() {
        let pairs: [(f64, f64); 10] = [
            (0.4, 1.9),
            (0.7, 2.0),
            (0.3, 1.6),
            (0.9, 2.5),
            (0.5, 3.0),
            (0.8, 2.2),
            (1.0, 2.5),
            (0.75, 2.4),
            (0.6, 2.6),
            (0.35, 1.7),
        ];
        let mut selected = 0;
        for (s, &(s1, s2)) in pairs.iter().enumerate() {
            let spec = reverse_child_scm([s1, s2]);
            let mut rng = seed::rng(s as u64, "bf-scm", 0);
            let data = MultiEnvDataset::from_scm(&spec, 5000, &mut rng).unwrap();
            let bf = fit_fair_bf(&data, 36.0, 2).unwrap();
            if bf.fit.support == vec![0] {
                selected += 1;
                assert_abs_diff_eq!(bf.fit.coefficients[0], 1.0, epsilon = 0.05);
            }
            // global-minimum property against the true-support solution
            let ls = fit_pooled_ls(&data, &[0]).unwrap();
            let pen = linear_sup_penalty(&ls.coefficients, ls.intercept, &[0], &data).unwrap();
            let g = |xr: ArrayView1<f64>| {
                xr.dot(&ArrayView1::from(ls.coefficients.as_slice())) + ls.intercept
            };
            let obj_star = pooled_risk(&g, &data, LossKind::Squared).unwrap() + 36.0 * pen;
            assert!(
                bf.objective <= obj_star + 1e-9,
                "seed {s}: {} > {}",
                bf.objective,
                obj_star
            );
        }
        assert!(selected >= 9, "selected the parent in {selected}/10 runs");
    }

    #[test]
    fn guard_rejects_large_dimensions() {
        let mut rng = seed::rng(7, "bf", 2);
        let x = Array2::from_shape_fn((30, 21), |_| rng.gen_range(-1.0..1.0));
        let y = Array1::zeros(30);
        let data = dataset_from(x, y);
        assert!(fit_fair_bf(&data, 1.0, 21).is_err());
    }

    #[test]
    fn selection_examples() {
        let gate = GateState::new(vec![0.0, 0.0, 0.0], 0.05).unwrap();
        assert!(select_variables(&gate, 0.9).unwrap().selected.is_empty());
        let gate = GateState::new(vec![50.0, -50.0, 50.0], 0.05).unwrap();
        assert_eq!(
            select_variables(&gate, 0.9).unwrap().selected,
            BTreeSet::from([0, 2])
        );
        // monotone in the threshold
        let gate = GateState::new(vec![2.0, -0.5, 0.6, 3.0], 0.05).unwrap();
        let tight = select_variables(&gate, 0.9).unwrap().selected;
        let loose = select_variables(&gate, 0.6).unwrap().selected;
        assert!(tight.is_subset(&loose));
        assert!(select_variables(&gate, 1.0).is_err());
    }

    #[test]
    fn refit_equals_pooled_ls() {
        let mut rng = seed::rng(8, "refit", 0);
        let x = Array2::from_shape_fn((50, 4), |_| rng.gen_range(-1.0..1.0));
        let y = Array1::from_shape_fn(50, |i| x[(i, 3)] + rng.gen_range(-0.1..0.1));
        let data = dataset_from(x, y);
        let sel = BTreeSet::from([1, 3]);
        let a = refit_ls(&data, &sel).unwrap();
        let b = fit_pooled_ls(&data, &[1, 3]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pooled_mlp_learns_a_simple_signal() {
        let mut rng = seed::rng(9, "mlp-fit", 0);
        let n = 700;
        let x = Array2::<f64>::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0));
        let y = Array1::from_shape_fn(n, |i| {
            (2.0 * x[(i, 0)]).sin() + 0.1 * rng.gen_range(-1.0..1.0)
        });
        let data = dataset_from(x.clone(), y);
        let cfg = MlpFitConfig {
            iters: 3000,
            width: 32,
            ..MlpFitConfig::default_with_seed(123)
        };
        let fit = fit_pooled_mlp(&data, &[0], &cfg).unwrap();
        let preds = fit.predict(x.view()).unwrap();
        let mut mse = 0.0;
        for i in 0..n {
            let t = (2.0 * x[(i, 0)]).sin();
            mse += (preds[i] - t).powi(2);
        }
        mse /= n as f64;
        assert!(mse < 0.02, "mse {mse}");
        assert!(fit.validation_loss.unwrap() < 0.05);
    }

    /// The closed-form search objective equals the component functions'
    /// value at the returned parameters.
    #[test]
    fn brute_force_objective_matches_components() {
        let mut rng = seed::rng(10, "obj", 0);
        let x = Array2::from_shape_fn((90, 2), |_| rng.gen_range(-1.0..1.0));
        let y = Array1::from_shape_fn(90, |i| x[(i, 0)] + 0.3 * rng.gen_range(-1.0..1.0));
        let data = dataset_from(x, y);
        let bf = fit_fair_bf(&data, 7.0, 2).unwrap();
        let g = |xr: ArrayView1<f64>| {
            xr.dot(&ArrayView1::from(bf.fit.coefficients.as_slice())) + bf.fit.intercept
        };
        let pen = linear_sup_penalty(
            &bf.fit.coefficients,
            bf.fit.intercept,
            &bf.fit.support,
            &data,
        )
        .unwrap();
        let risk = pooled_risk(&g, &data, LossKind::Squared).unwrap();
        assert_abs_diff_eq!(bf.objective, risk + 7.0 * pen, epsilon = 1e-9);
    }
}
