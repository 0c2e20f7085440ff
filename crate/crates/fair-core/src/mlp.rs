//! Truncated fully-connected ReLU networks with exact reverse-mode gradients,
//! plus the Adam optimizer used to train them.
//!
//! A network with hidden depth `L` and widths `(d_0, d_1, ..., d_L, 1)`
//! applies `L + 1` affine maps with entrywise ReLU between them and clamps
//! the scalar output to `[-B, B]`. Parameters live in one flat `Vec<f64>`
//! (weights then biases, layer by layer) so optimizer state, gradient
//! buffers, and bitwise equality checks are trivial.
//!
//! Subgradient conventions: ReLU uses 0 at the kink; the output clamp passes
//! the gradient through on `|z| <= B` and zeroes it strictly outside.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

/// Clamp `z` to `[-b, b]`; `b` must be positive.
#[inline]
pub fn truncate(z: f64, b: f64) -> f64 {
    debug_assert!(b > 0.0, "truncation bound must be positive");
    z.clamp(-b, b)
}

/// Flat parameter layout for a stack of affine layers.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    widths: Vec<usize>,
    // (weight offset, bias offset) per affine layer
    offsets: Vec<(usize, usize)>,
    total: usize,
}

impl Layout {
    fn new(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::invalid("network needs at least input and output widths"));
        }
        if *widths.last().unwrap() != 1 {
            return Err(Error::invalid("output width must be 1"));
        }
        if widths.contains(&0) {
            return Err(Error::invalid("zero layer width"));
        }
        let mut offsets = Vec::with_capacity(widths.len() - 1);
        let mut total = 0;
        for a in 0..widths.len() - 1 {
            let wo = total;
            total += widths[a + 1] * widths[a];
            let bo = total;
            total += widths[a + 1];
            offsets.push((wo, bo));
        }
        Ok(Layout {
            widths: widths.to_vec(),
            offsets,
            total,
        })
    }

    fn num_affine(&self) -> usize {
        self.widths.len() - 1
    }

    fn weight<'a>(&self, flat: &'a [f64], a: usize) -> ArrayView2<'a, f64> {
        let (wo, bo) = self.offsets[a];
        ArrayView2::from_shape((self.widths[a + 1], self.widths[a]), &flat[wo..bo]).unwrap()
    }

    fn bias<'a>(&self, flat: &'a [f64], a: usize) -> ArrayView1<'a, f64> {
        let (_, bo) = self.offsets[a];
        let end = bo + self.widths[a + 1];
        ArrayView1::from_shape(self.widths[a + 1], &flat[bo..end]).unwrap()
    }

    fn weight_mut<'a>(&self, flat: &'a mut [f64], a: usize) -> ArrayViewMut2<'a, f64> {
        let (wo, bo) = self.offsets[a];
        ArrayViewMut2::from_shape((self.widths[a + 1], self.widths[a]), &mut flat[wo..bo]).unwrap()
    }
}

/// Parameters of a truncated ReLU network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layout: Layout,
    flat: Vec<f64>,
    trunc_bound: f64,
}

/// Gradient record with the same flat layout as [`MlpParams`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    layout: Layout,
    flat: Vec<f64>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        MlpGrads {
            layout: params.layout.clone(),
            flat: vec![0.0; params.layout.total],
        }
    }

    pub fn fill_zero(&mut self) {
        self.flat.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.flat
    }

    /// Gradient of the weight matrix of affine layer `a`.
    pub fn weight(&self, a: usize) -> ArrayView2<'_, f64> {
        self.layout.weight(&self.flat, a)
    }

    /// Gradient of the bias vector of affine layer `a`.
    pub fn bias(&self, a: usize) -> ArrayView1<'_, f64> {
        self.layout.bias(&self.flat, a)
    }
}

/// Scratch buffers for batched forward/backward passes.
#[derive(Debug, Default, Clone)]
pub struct MlpWorkspace {
    // Activations per stage: acts[0] is the input batch, acts[a+1] the
    // post-ReLU output of affine layer a (pre-truncation for the last one).
    acts: Vec<Array2<f64>>,
    // Per-sample pre-truncation outputs of the last layer.
    pre_trunc: Vec<f64>,
}

impl MlpParams {
    /// All-zero parameters for the given widths `(d_0, ..., d_L, 1)`.
    pub fn zeros(widths: &[usize], trunc_bound: f64) -> Result<Self> {
        if !trunc_bound.is_finite() || trunc_bound <= 0.0 {
            return Err(Error::invalid("truncation bound must be positive"));
        }
        let layout = Layout::new(widths)?;
        let flat = vec![0.0; layout.total];
        Ok(MlpParams {
            layout,
            flat,
            trunc_bound,
        })
    }

    /// He-style initialization: weights uniform in `±sqrt(6 / fan_in)`,
    /// biases zero.
    pub fn he_init(widths: &[usize], trunc_bound: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(widths, trunc_bound)?;
        for a in 0..p.layout.num_affine() {
            let bound = (6.0 / p.layout.widths[a] as f64).sqrt();
            let layout = p.layout.clone();
            let mut w = layout.weight_mut(&mut p.flat, a);
            for x in w.iter_mut() {
                *x = rng.gen_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn widths(&self) -> &[usize] {
        &self.layout.widths
    }

    pub fn input_dim(&self) -> usize {
        self.layout.widths[0]
    }

    /// Hidden depth `L` (number of ReLU stages).
    pub fn depth(&self) -> usize {
        self.layout.widths.len() - 2
    }

    pub fn trunc_bound(&self) -> f64 {
        self.trunc_bound
    }

    pub fn param_len(&self) -> usize {
        self.layout.total
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.flat
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn weight(&self, a: usize) -> ArrayView2<'_, f64> {
        self.layout.weight(&self.flat, a)
    }

    pub fn bias(&self, a: usize) -> ArrayView1<'_, f64> {
        self.layout.bias(&self.flat, a)
    }

    /// Set one weight entry; rows index the output dimension.
    pub fn set_weight(&mut self, a: usize, row: usize, col: usize, v: f64) {
        let layout = self.layout.clone();
        layout.weight_mut(&mut self.flat, a)[(row, col)] = v;
    }

    pub fn set_bias(&mut self, a: usize, row: usize, v: f64) {
        let (_, bo) = self.layout.offsets[a];
        self.flat[bo + row] = v;
    }

    /// Forward pass over a batch; fills `out` with truncated predictions and
    /// leaves the activations in `ws` for a subsequent backward pass.
    pub fn forward_batch(
        &self,
        x: ArrayView2<f64>,
        ws: &mut MlpWorkspace,
        out: &mut Vec<f64>,
    ) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "mlp forward",
                expected: self.input_dim(),
                found: x.ncols(),
            });
        }
        let na = self.layout.num_affine();
        ws.acts.clear();
        ws.acts.push(x.to_owned());
        for a in 0..na {
            let w = self.weight(a);
            let b = self.bias(a);
            let mut z = ws.acts[a].dot(&w.t());
            z += &b;
            if a + 1 < na {
                z.mapv_inplace(|v| v.max(0.0));
            }
            ws.acts.push(z);
        }
        let last = &ws.acts[na];
        ws.pre_trunc.clear();
        ws.pre_trunc.extend(last.column(0).iter().copied());
        out.clear();
        out.extend(
            ws.pre_trunc
                .iter()
                .map(|&z| truncate(z, self.trunc_bound)),
        );
        Ok(())
    }

    /// Reverse-mode pass for the batch most recently run through
    /// [`forward_batch`] with the same workspace.
    ///
    /// `upstream[i]` is d(loss)/d(output_i). Parameter gradients are
    /// accumulated into `grads` (not zeroed here); per-sample input gradients
    /// are accumulated into `input_grads` when provided.
    pub fn backward_batch(
        &self,
        ws: &mut MlpWorkspace,
        upstream: &[f64],
        grads: &mut MlpGrads,
        mut input_grads: Option<&mut Array2<f64>>,
    ) -> Result<()> {
        let na = self.layout.num_affine();
        let m = ws.pre_trunc.len();
        if upstream.len() != m {
            return Err(Error::DimensionMismatch {
                context: "mlp backward",
                expected: m,
                found: upstream.len(),
            });
        }
        if grads.layout != self.layout {
            return Err(Error::invalid("gradient buffer layout mismatch"));
        }
        // Truncation gate: zero strictly outside the bound, pass-through at it.
        let mut delta = Array2::<f64>::zeros((m, 1));
        for i in 0..m {
            delta[(i, 0)] = if ws.pre_trunc[i].abs() > self.trunc_bound {
                0.0
            } else {
                upstream[i]
            };
        }
        for a in (0..na).rev() {
            // Accumulate parameter gradients of affine layer a.
            {
                let gw_update = delta.t().dot(&ws.acts[a]);
                let mut gw = self.layout.weight_mut(&mut grads.flat, a);
                gw += &gw_update;
                let gb_update = delta.sum_axis(Axis(0));
                let (_, bo) = self.layout.offsets[a];
                for (g, u) in grads.flat[bo..bo + self.layout.widths[a + 1]]
                    .iter_mut()
                    .zip(gb_update.iter())
                {
                    *g += *u;
                }
            }
            // Propagate to the previous stage.
            let w = self.weight(a);
            let mut d_prev = delta.dot(&w);
            if a > 0 {
                // ReLU mask: post-activation is positive iff pre-activation was.
                d_prev.zip_mut_with(&ws.acts[a], |d, &h| {
                    if h <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = d_prev;
            } else if let Some(ig) = input_grads.as_deref_mut() {
                *ig += &d_prev;
            }
        }
        Ok(())
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<f64> {
        let mut ws = MlpWorkspace::default();
        let mut out = Vec::with_capacity(1);
        let xm = x.insert_axis(Axis(0));
        self.forward_batch(xm, &mut ws, &mut out)?;
        Ok(out[0])
    }

    /// Single-sample reverse-mode pass: exact gradients of
    /// `upstream * output` with respect to every weight, bias, and the input.
    pub fn backward(
        &self,
        x: ArrayView1<f64>,
        upstream: f64,
    ) -> Result<(MlpGrads, Array1<f64>)> {
        let mut ws = MlpWorkspace::default();
        let mut out = Vec::with_capacity(1);
        self.forward_batch(x.insert_axis(Axis(0)), &mut ws, &mut out)?;
        let mut grads = MlpGrads::zeros_like(self);
        let mut ig = Array2::<f64>::zeros((1, self.input_dim()));
        self.backward_batch(&mut ws, &[upstream], &mut grads, Some(&mut ig))?;
        Ok((grads, ig.row(0).to_owned()))
    }
}

/// Adam hyper-parameters. Defaults follow the usual convention.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam optimizer state for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    hyper: AdamParams,
    step_count: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(dim: usize, hyper: AdamParams) -> Self {
        assert!(hyper.lr > 0.0 && hyper.eps > 0.0);
        assert!((0.0..1.0).contains(&hyper.beta1) && (0.0..1.0).contains(&hyper.beta2));
        AdamState {
            hyper,
            step_count: 0,
            first_moment: vec![0.0; dim],
            second_moment: vec![0.0; dim],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected Adam descent step.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::DimensionMismatch {
                context: "adam step",
                expected: self.first_moment.len(),
                found: grads.len(),
            });
        }
        self.step_count += 1;
        let h = self.hyper;
        let c1 = 1.0 - h.beta1.powi(self.step_count as i32);
        let c2 = 1.0 - h.beta2.powi(self.step_count as i32);
        for i in 0..params.len() {
            let g = grads[i];
            let m = &mut self.first_moment[i];
            *m = h.beta1 * *m + (1.0 - h.beta1) * g;
            let v = &mut self.second_moment[i];
            *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            params[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
        }
        Ok(())
    }
}
