//! Stochastic gradient descent-ascent training of a gated predictor
//! against per-environment discriminators.
//!
//! One outer iteration anneals the gate temperature, runs `disc_steps`
//! discriminator ascent blocks (fresh gate noise per block, one minibatch
//! and one Adam ascent step per environment), then `pred_steps` predictor
//! descent blocks (fresh gate noise, one minibatch per environment, a
//! single Adam descent step on the network parameters and the gate logits
//! jointly). Gates multiply the covariates entering both the predictor and
//! the discriminators, and the logit gradient flows through both paths;
//! discriminator parameters stay fixed during descent.
//!
//! Randomness comes from three seed-derived streams (`"init"`, `"gumbel"`,
//! `"minibatch"`; see [`crate::seed`]), consumed in loop order, so a
//! `(config, data)` pair determines the result bit for bit.

use crate::error::{Error, Result};
use crate::gate::{draw_uniforms, gate_sample, gate_value, sigmoid, AnnealSchedule, GateState};
use crate::mlp::{AdamParams, AdamState, MlpGrads, MlpParams, MlpWorkspace};
use crate::objective::{loss_grad, loss_value, EnvData, LossKind, MultiEnvDataset};
use crate::seed;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Architecture of the predictor or a discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchSpec {
    Linear,
    Mlp { depth: usize, width: usize, trunc: f64 },
}

/// Training hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairConfig {
    pub gamma: f64,
    pub loss: LossKind,
    /// Outer iterations T.
    pub total_iters: u64,
    /// Discriminator ascent blocks per iteration.
    pub disc_steps: u64,
    /// Predictor descent blocks per iteration.
    pub pred_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Discriminator learning rate; defaults to `lr`.
    pub disc_lr: Option<f64>,
    pub anneal: AnnealSchedule,
    pub seed: u64,
    /// Gate draws averaged at prediction time.
    pub eval_gumbel_samples: usize,
    /// Initial gate logits (0 = half-open).
    pub gate_init: f64,
    /// When false the gate logits stay frozen at `gate_init`.
    pub train_gates: bool,
    /// Record diagnostics every this many iterations (0 = never).
    pub diag_interval: u64,
}

impl FairConfig {
    /// Defaults matching the linear benchmarks: gamma 36, squared loss,
    /// 50k iterations, three ascent blocks per descent, batch 64,
    /// learning rate 1e-3, temperature 0.5 -> 0.05.
    pub fn default_linear(seed: u64) -> Self {
        FairConfig {
            gamma: 36.0,
            loss: LossKind::Squared,
            total_iters: 50_000,
            disc_steps: 3,
            pred_steps: 1,
            batch_size: 64,
            lr: 1e-3,
            disc_lr: None,
            anneal: AnnealSchedule::new(0.5, 0.05, 50_000).unwrap(),
            seed,
            eval_gumbel_samples: 100,
            gate_init: 0.0,
            train_gates: true,
            diag_interval: 100,
        }
    }

    /// Same defaults with the iteration budget (and schedule length)
    /// replaced.
    pub fn with_iters(mut self, iters: u64) -> Self {
        self.total_iters = iters;
        self.anneal = AnnealSchedule::new(self.anneal.tau0, self.anneal.tau_final, iters).unwrap();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(Error::invalid("gamma must be nonnegative"));
        }
        if self.total_iters == 0
            || self.disc_steps == 0
            || self.pred_steps == 0
            || self.batch_size == 0
        {
            return Err(Error::invalid(
                "iteration counts and batch size must be positive",
            ));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.eval_gumbel_samples == 0 {
            return Err(Error::invalid("eval_gumbel_samples must be positive"));
        }
        Ok(())
    }
}

/// Linear map `x -> coeffs . x (+ intercept)` stored as one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    flat: Vec<f64>,
    dim: usize,
    has_intercept: bool,
}

impl LinearModel {
    pub fn zeros(dim: usize, has_intercept: bool) -> Self {
        LinearModel {
            flat: vec![0.0; dim + usize::from(has_intercept)],
            dim,
            has_intercept,
        }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.flat[..self.dim]
    }

    pub fn intercept(&self) -> f64 {
        if self.has_intercept {
            self.flat[self.dim]
        } else {
            0.0
        }
    }
}

/// Parameters of either architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    Linear(LinearModel),
    Mlp(MlpParams),
}

impl ModelParams {
    /// Fresh parameters: zero for linear models, He-style uniform for
    /// networks (biases zero).
    pub fn init(
        arch: &ArchSpec,
        dim: usize,
        has_intercept: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(match arch {
            ArchSpec::Linear => ModelParams::Linear(LinearModel::zeros(dim, has_intercept)),
            ArchSpec::Mlp { depth, width, trunc } => {
                let mut widths = vec![dim];
                widths.extend(std::iter::repeat_n(*width, *depth));
                widths.push(1);
                ModelParams::Mlp(MlpParams::he_init(&widths, *trunc, rng)?)
            }
        })
    }

    pub fn param_len(&self) -> usize {
        match self {
            ModelParams::Linear(l) => l.flat.len(),
            ModelParams::Mlp(m) => m.param_len(),
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            ModelParams::Linear(l) => &l.flat,
            ModelParams::Mlp(m) => m.as_slice(),
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            ModelParams::Linear(l) => &mut l.flat,
            ModelParams::Mlp(m) => m.as_mut_slice(),
        }
    }

    /// Raw outputs over a batch; network activations stay in `ws` for the
    /// matching backward pass.
    pub fn forward(
        &self,
        x: ArrayView2<f64>,
        ws: &mut NetWorkspace,
        out: &mut Vec<f64>,
    ) -> Result<()> {
        match self {
            ModelParams::Linear(l) => {
                if x.ncols() != l.dim {
                    return Err(Error::DimensionMismatch {
                        context: "linear forward",
                        expected: l.dim,
                        found: x.ncols(),
                    });
                }
                out.clear();
                let c = ArrayView1::from(l.coeffs());
                let b = l.intercept();
                out.extend(x.rows().into_iter().map(|row| row.dot(&c) + b));
                Ok(())
            }
            ModelParams::Mlp(m) => m.forward_batch(x, &mut ws.mlp, out),
        }
    }

    /// Accumulate parameter gradients of `sum_i upstream_i * output_i` into
    /// `grads` and, when requested, per-sample input gradients.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        ws: &mut NetWorkspace,
        upstream: &[f64],
        grads: &mut [f64],
        mut input_grads: Option<&mut Array2<f64>>,
    ) -> Result<()> {
        if grads.len() != self.param_len() {
            return Err(Error::DimensionMismatch {
                context: "gradient buffer",
                expected: self.param_len(),
                found: grads.len(),
            });
        }
        match self {
            ModelParams::Linear(l) => {
                for (i, row) in x.rows().into_iter().enumerate() {
                    let u = upstream[i];
                    for j in 0..l.dim {
                        grads[j] += u * row[j];
                    }
                    if l.has_intercept {
                        grads[l.dim] += u;
                    }
                    if let Some(ig) = input_grads.as_deref_mut() {
                        for j in 0..l.dim {
                            ig[(i, j)] += u * l.flat[j];
                        }
                    }
                }
                Ok(())
            }
            ModelParams::Mlp(m) => {
                let mut g = MlpGrads::zeros_like(m);
                m.backward_batch(&mut ws.mlp, upstream, &mut g, input_grads)?;
                for (acc, v) in grads.iter_mut().zip(g.as_slice()) {
                    *acc += *v;
                }
                Ok(())
            }
        }
    }

    /// Scalar raw output for one covariate vector.
    pub fn forward_one(&self, x: ArrayView1<f64>) -> Result<f64> {
        let mut ws = NetWorkspace::default();
        let mut out = Vec::with_capacity(1);
        let xm = x.insert_axis(ndarray::Axis(0));
        self.forward(xm, &mut ws, &mut out)?;
        Ok(out[0])
    }
}

/// Scratch buffers for [`ModelParams::forward`]/[`ModelParams::backward`].
#[derive(Debug, Default, Clone)]
pub struct NetWorkspace {
    mlp: MlpWorkspace,
}

/// Prediction transform mapping a raw output to the loss domain; returns
/// the prediction and its derivative in the raw output.
#[inline]
fn transform(loss: LossKind, raw: f64) -> (f64, f64) {
    match loss {
        LossKind::Squared => (raw, 1.0),
        LossKind::Logistic => {
            let s = sigmoid(raw);
            (crate::objective::clip_prob(s), s * (1.0 - s))
        }
    }
}

/// A borrowed minibatch (or full environment) of raw, ungated covariates.
#[derive(Debug, Clone, Copy)]
pub struct BatchRef<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: ArrayView1<'a, f64>,
}

/// Shared per-block context: gate logits, temperature, the block's gate
/// noise, and the objective parameters.
#[derive(Debug, Clone, Copy)]
pub struct BlockContext<'a> {
    pub gate_logits: &'a [f64],
    pub tau: f64,
    pub uniforms: &'a [f64],
    pub gamma: f64,
    pub loss: LossKind,
}

impl<'a> BlockContext<'a> {
    fn gates(&self) -> Result<Vec<f64>> {
        let state = GateState::new(self.gate_logits.to_vec(), self.tau)?;
        gate_sample(&state, self.uniforms)
    }
}

fn gated_rows(x: ArrayView2<f64>, gates: &[f64]) -> Array2<f64> {
    let mut g = x.to_owned();
    for mut row in g.rows_mut() {
        for (v, &a) in row.iter_mut().zip(gates) {
            *v *= a;
        }
    }
    g
}

/// Ascent gradient of one environment's penalty term
/// `(gamma / m) * sum_i [ (y_i - g(a.x_i)) f(a.x_i) - f(a.x_i)^2 / 2 ]`
/// with respect to the discriminator parameters (predictor and gates
/// fixed). Returns the term's value and the gradient.
pub fn discriminator_block_grads(
    predictor: &ModelParams,
    discriminator: &ModelParams,
    ctx: &BlockContext,
    batch: BatchRef,
) -> Result<(f64, Vec<f64>)> {
    let gates = ctx.gates()?;
    let m = batch.y.len();
    let gated = gated_rows(batch.x, &gates);
    let mut ws_g = NetWorkspace::default();
    let mut ws_f = NetWorkspace::default();
    let mut raw_g = Vec::with_capacity(m);
    let mut f_out = Vec::with_capacity(m);
    predictor.forward(gated.view(), &mut ws_g, &mut raw_g)?;
    discriminator.forward(gated.view(), &mut ws_f, &mut f_out)?;
    let inv_m = 1.0 / m as f64;
    let mut value = 0.0;
    let mut upstream = Vec::with_capacity(m);
    for i in 0..m {
        let (v, _) = transform(ctx.loss, raw_g[i]);
        let r = batch.y[i] - v;
        let f = f_out[i];
        value += ctx.gamma * inv_m * (r * f - 0.5 * f * f);
        upstream.push(ctx.gamma * inv_m * (r - f));
    }
    let mut grads = vec![0.0; discriminator.param_len()];
    discriminator.backward(gated.view(), &mut ws_f, &upstream, &mut grads, None)?;
    Ok((value, grads))
}

/// Value and descent gradients of the predictor-block objective
/// `sum_e [ (1/m) sum_i loss(y, g) + (gamma/m) sum_i ((y - g) f_e - f_e^2/2) ]`
/// with respect to the predictor parameters and the gate logits
/// (discriminator parameters fixed; the logit gradient flows through the
/// gated inputs of both the predictor and the discriminators).
pub fn predictor_block_eval(
    predictor: &ModelParams,
    discriminators: &[ModelParams],
    ctx: &BlockContext,
    batches: &[BatchRef],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if discriminators.len() != batches.len() {
        return Err(Error::DimensionMismatch {
            context: "one discriminator per environment",
            expected: batches.len(),
            found: discriminators.len(),
        });
    }
    let d = ctx.gate_logits.len();
    let gates = ctx.gates()?;
    // d a_j / d w_j, shared across the block
    let dadw: Vec<f64> = gates.iter().map(|&a| a * (1.0 - a) / ctx.tau).collect();
    let mut value = 0.0;
    let mut pred_grads = vec![0.0; predictor.param_len()];
    let mut gate_grads = vec![0.0; d];
    let mut scratch_disc = Vec::new();
    for (disc, batch) in discriminators.iter().zip(batches) {
        let m = batch.y.len();
        let inv_m = 1.0 / m as f64;
        let gated = gated_rows(batch.x, &gates);
        let mut ws_g = NetWorkspace::default();
        let mut ws_f = NetWorkspace::default();
        let mut raw_g = Vec::with_capacity(m);
        let mut f_out = Vec::with_capacity(m);
        predictor.forward(gated.view(), &mut ws_g, &mut raw_g)?;
        disc.forward(gated.view(), &mut ws_f, &mut f_out)?;
        let mut up_g = Vec::with_capacity(m);
        let mut up_f = Vec::with_capacity(m);
        for i in 0..m {
            let (v, dv) = transform(ctx.loss, raw_g[i]);
            let y = batch.y[i];
            let f = f_out[i];
            let r = y - v;
            value += inv_m * (loss_value(ctx.loss, y, v)? + ctx.gamma * (r * f - 0.5 * f * f));
            // d/d raw of the loss plus the penalty term involving g
            up_g.push(inv_m * dv * (loss_grad(ctx.loss, y, v)? - ctx.gamma * f));
            // d/d f of the penalty (for the gate path through f's input)
            up_f.push(inv_m * ctx.gamma * (r - f));
        }
        let mut ig_g = Array2::<f64>::zeros((m, d));
        predictor.backward(gated.view(), &mut ws_g, &up_g, &mut pred_grads, Some(&mut ig_g))?;
        scratch_disc.clear();
        scratch_disc.resize(disc.param_len(), 0.0);
        let mut ig_f = Array2::<f64>::zeros((m, d));
        disc.backward(gated.view(), &mut ws_f, &up_f, &mut scratch_disc, Some(&mut ig_f))?;
        for i in 0..m {
            let xr = batch.x.row(i);
            for j in 0..d {
                gate_grads[j] += (ig_g[(i, j)] + ig_f[(i, j)]) * xr[j] * dadw[j];
            }
        }
    }
    Ok((value, pred_grads, gate_grads))
}

/// Full-data objective with deterministic gate values (no noise): the
/// pooled risk plus `gamma` times the penalty, all inputs gated by `gates`.
pub fn gated_objective(
    predictor: &ModelParams,
    discriminators: &[ModelParams],
    gates: &[f64],
    data: &MultiEnvDataset,
    loss: LossKind,
    gamma: f64,
) -> Result<f64> {
    let mut acc = 0.0;
    let mut ws = NetWorkspace::default();
    let mut raw_g = Vec::new();
    let mut f_out = Vec::new();
    for (env, disc) in data.envs().iter().zip(discriminators) {
        let gated = gated_rows(env.x.view(), gates);
        predictor.forward(gated.view(), &mut ws, &mut raw_g)?;
        disc.forward(gated.view(), &mut ws, &mut f_out)?;
        let mut env_acc = 0.0;
        for i in 0..env.y.len() {
            let (v, _) = transform(loss, raw_g[i]);
            let f = f_out[i];
            env_acc += loss_value(loss, env.y[i], v)? + gamma * ((env.y[i] - v) * f - 0.5 * f * f);
        }
        acc += env_acc / env.y.len() as f64;
    }
    Ok(acc / data.env_count() as f64)
}

/// One diagnostics sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagRecord {
    pub iter: u64,
    pub objective: f64,
    pub gate_probs: Vec<f64>,
}

/// Output of [`train_fair`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub predictor: ModelParams,
    pub gate: GateState,
    pub discriminators: Vec<ModelParams>,
    pub history: Vec<DiagRecord>,
    pub loss: LossKind,
    pub eval_gumbel_samples: usize,
    pub seed: u64,
}

impl TrainedModel {
    /// Gate inclusion probabilities.
    pub fn gate_probs(&self) -> Vec<f64> {
        self.gate.probs()
    }

    /// Linear coefficients shrunk by the gate probabilities (with the
    /// intercept passed through), when the predictor is linear.
    pub fn reported_linear_coefficients(&self) -> Option<(Vec<f64>, f64)> {
        match &self.predictor {
            ModelParams::Linear(l) => {
                let probs = self.gate.probs();
                let coeffs = l
                    .coeffs()
                    .iter()
                    .zip(&probs)
                    .map(|(&b, &p)| b * p)
                    .collect();
                Some((coeffs, l.intercept()))
            }
            ModelParams::Mlp(_) => None,
        }
    }

    /// Monte-Carlo predictions: average the gated predictor over
    /// `self.eval_gumbel_samples` gate draws at the final temperature. The
    /// noise stream derives from the training seed.
    pub fn predict_mc(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let d = self.gate.dim();
        if x.ncols() != d {
            return Err(Error::DimensionMismatch {
                context: "prediction covariates",
                expected: d,
                found: x.ncols(),
            });
        }
        let mut rng = seed::rng(self.seed, "eval", 0);
        let mut acc = Array1::<f64>::zeros(x.nrows());
        let mut ws = NetWorkspace::default();
        let mut out = Vec::new();
        for _ in 0..self.eval_gumbel_samples {
            let u = draw_uniforms(d, &mut rng);
            let gates: Vec<f64> = u
                .iter()
                .zip(&self.gate.logits)
                .map(|(&ui, &w)| gate_value(ui, w, self.gate.tau))
                .collect();
            let gated = gated_rows(x, &gates);
            self.predictor.forward(gated.view(), &mut ws, &mut out)?;
            for (a, &raw) in acc.iter_mut().zip(out.iter()) {
                *a += transform(self.loss, raw).0;
            }
        }
        let n = self.eval_gumbel_samples as f64;
        acc.mapv_inplace(|v| v / n);
        Ok(acc)
    }

    /// Predictions with the gates fixed at their inclusion probabilities.
    pub fn predict_expected_gates(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let gates = self.gate.probs();
        let gated = gated_rows(x, &gates);
        let mut ws = NetWorkspace::default();
        let mut out = Vec::new();
        self.predictor.forward(gated.view(), &mut ws, &mut out)?;
        Ok(out
            .into_iter()
            .map(|raw| transform(self.loss, raw).0)
            .collect())
    }
}

fn sample_batch(
    env: &EnvData,
    m: usize,
    rng: &mut impl Rng,
    xb: &mut Array2<f64>,
    yb: &mut Array1<f64>,
) {
    let n = env.y.len();
    for i in 0..m {
        let k = rng.gen_range(0..n);
        xb.row_mut(i).assign(&env.x.row(k));
        yb[i] = env.y[k];
    }
}

/// Run the full descent-ascent loop and return the trained parameters.
pub fn train_fair(
    config: &FairConfig,
    data: &MultiEnvDataset,
    predictor_arch: &ArchSpec,
    discriminator_arch: &ArchSpec,
) -> Result<TrainedModel> {
    config.validate()?;
    let d = data.dim();
    let n_envs = data.env_count();
    let mut rng_init = seed::rng(config.seed, "init", 0);
    let mut rng_gumbel = seed::rng(config.seed, "gumbel", 0);
    let mut rng_batch = seed::rng(config.seed, "minibatch", 0);

    let mut predictor = ModelParams::init(predictor_arch, d, true, &mut rng_init)?;
    let mut discriminators: Vec<ModelParams> = (0..n_envs)
        .map(|_| ModelParams::init(discriminator_arch, d, false, &mut rng_init))
        .collect::<Result<_>>()?;
    let mut logits = vec![config.gate_init; d];

    let mut adam_pred = AdamState::new(predictor.param_len(), AdamParams::with_lr(config.lr));
    let mut adam_gate = AdamState::new(d, AdamParams::with_lr(config.lr));
    let disc_lr = config.disc_lr.unwrap_or(config.lr);
    let mut adam_disc: Vec<AdamState> = discriminators
        .iter()
        .map(|dm| AdamState::new(dm.param_len(), AdamParams::with_lr(disc_lr)))
        .collect();

    let m = config.batch_size;
    let mut xb = Array2::<f64>::zeros((m, d));
    let mut yb = Array1::<f64>::zeros(m);
    let mut history = Vec::new();

    for t in 1..=config.total_iters {
        let tau = config.anneal.tau_at(t);
        for _ in 0..config.disc_steps {
            let uniforms = draw_uniforms(d, &mut rng_gumbel);
            for e in 0..n_envs {
                sample_batch(data.env(e), m, &mut rng_batch, &mut xb, &mut yb);
                let ctx = BlockContext {
                    gate_logits: &logits,
                    tau,
                    uniforms: &uniforms,
                    gamma: config.gamma,
                    loss: config.loss,
                };
                let batch = BatchRef {
                    x: xb.view(),
                    y: yb.view(),
                };
                let (_, ascent) =
                    discriminator_block_grads(&predictor, &discriminators[e], &ctx, batch)?;
                // Adam descends, so feed the negated ascent direction.
                let descent: Vec<f64> = ascent.iter().map(|g| -g).collect();
                adam_disc[e].step(discriminators[e].params_mut(), &descent)?;
            }
        }
        for _ in 0..config.pred_steps {
            let uniforms = draw_uniforms(d, &mut rng_gumbel);
            let mut batch_x = Vec::with_capacity(n_envs);
            let mut batch_y = Vec::with_capacity(n_envs);
            for e in 0..n_envs {
                let mut bx = Array2::<f64>::zeros((m, d));
                let mut by = Array1::<f64>::zeros(m);
                sample_batch(data.env(e), m, &mut rng_batch, &mut bx, &mut by);
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
                gate_logits: &logits,
                tau,
                uniforms: &uniforms,
                gamma: config.gamma,
                loss: config.loss,
            };
            let (_, pred_grads, gate_grads) =
                predictor_block_eval(&predictor, &discriminators, &ctx, &batches)?;
            adam_pred.step(predictor.params_mut(), &pred_grads)?;
            if config.train_gates {
                adam_gate.step(&mut logits, &gate_grads)?;
            }
        }
        if config.diag_interval > 0 && t % config.diag_interval == 0 {
            let probs: Vec<f64> = logits.iter().map(|&w| sigmoid(w)).collect();
            let objective = gated_objective(
                &predictor,
                &discriminators,
                &probs,
                data,
                config.loss,
                config.gamma,
            )?;
            if !objective.is_finite() {
                return Err(Error::Numerical(format!(
                    "objective became non-finite at iteration {t}"
                )));
            }
            history.push(DiagRecord {
                iter: t,
                objective,
                gate_probs: probs,
            });
        }
    }

    let final_tau = config.anneal.tau_at(config.total_iters);
    Ok(TrainedModel {
        predictor,
        gate: GateState::new(logits, final_tau)?,
        discriminators,
        history,
        loss: config.loss,
        eval_gumbel_samples: config.eval_gumbel_samples,
        seed: config.seed,
    })
}
