//! Deep-wide regression network used as a nuisance learner.
//!
//! The deep path maps the controls through fully connected hidden layers;
//! the wide path is linear in the fixed-effect dummies. Both paths feed one
//! linear output unit and are trained jointly under mean absolute error with
//! an L2 penalty on the hidden-layer connection weights.
//!
//! All parameters live in one flat vector described by [`Layout`], so the
//! optimizer and the gradient share a single shape.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::TrainValSplit;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepWideSpec {
    pub deep_layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub l2_penalty: f64,
}

impl Default for DeepWideSpec {
    fn default() -> Self {
        DeepWideSpec {
            deep_layer_sizes: vec![16, 8],
            hidden_activation: Activation::Relu,
            l2_penalty: 0.05,
        }
    }
}

impl DeepWideSpec {
    pub fn validate(&self) -> Result<()> {
        if self.deep_layer_sizes.is_empty() || self.deep_layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(
                "deep path needs at least one layer, all of positive width".into(),
            ));
        }
        if !(self.l2_penalty >= 0.0) || !self.l2_penalty.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "l2 penalty must be finite and nonnegative, got {}",
                self.l2_penalty
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub moment1_decay: f64,
    pub moment2_decay: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    /// Zero returns the initial parameters untouched.
    pub max_epochs: usize,
    /// Epochs without a new best validation loss before stopping.
    pub patience: usize,
    /// Relative band above the best validation loss inside which the epoch
    /// with the smallest train/validation gap is selected.
    pub selection_band: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            moment1_decay: 0.9,
            moment2_decay: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            max_epochs: 500,
            patience: 25,
            selection_band: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let decay_ok = |d: f64| d > 0.0 && d < 1.0;
        if !(self.learning_rate > 0.0) || !decay_ok(self.moment1_decay) || !decay_ok(self.moment2_decay) {
            return Err(Error::InvalidArgument(
                "learning rate must be positive and moment decays in (0, 1)".into(),
            ));
        }
        if self.batch_size == 0 || !(self.epsilon > 0.0) || !(self.selection_band >= 0.0) {
            return Err(Error::InvalidArgument(
                "batch size and epsilon must be positive, selection band nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Offsets of every parameter block in the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub n_controls: usize,
    pub n_fixed_effects: usize,
    /// Per deep layer: (fan_in, fan_out, weight offset, bias offset).
    layers: Vec<(usize, usize, usize, usize)>,
    wide: usize,
    merge: usize,
    bias: usize,
    len: usize,
}

impl Layout {
    fn new(spec: &DeepWideSpec, k: usize, f: usize) -> Self {
        let mut offset = 0;
        let mut layers = Vec::with_capacity(spec.deep_layer_sizes.len());
        let mut fan_in = k;
        for &width in &spec.deep_layer_sizes {
            let w = offset;
            offset += fan_in * width;
            let b = offset;
            offset += width;
            layers.push((fan_in, width, w, b));
            fan_in = width;
        }
        let wide = offset;
        offset += f;
        let merge = offset;
        offset += fan_in;
        let bias = offset;
        offset += 1;
        Layout {
            n_controls: k,
            n_fixed_effects: f,
            layers,
            wide,
            merge,
            bias,
            len: offset,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn last_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.1)
    }
}

/// Weights and biases of a deep-wide network.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepWideParams {
    layout: Layout,
    values: Vec<f64>,
}

impl DeepWideParams {
    pub fn zeros(spec: &DeepWideSpec, k: usize, f: usize) -> Self {
        let layout = Layout::new(spec, k, f);
        let values = vec![0.0; layout.len];
        DeepWideParams { layout, values }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn n_layers(&self) -> usize {
        self.layout.layers.len()
    }

    /// Row-major (fan_in x fan_out) weight block of deep layer `l`.
    pub fn layer_weights(&self, l: usize) -> &[f64] {
        let (i, o, w, _) = self.layout.layers[l];
        &self.values[w..w + i * o]
    }

    pub fn layer_weights_mut(&mut self, l: usize) -> &mut [f64] {
        let (i, o, w, _) = self.layout.layers[l];
        &mut self.values[w..w + i * o]
    }

    pub fn layer_bias(&self, l: usize) -> &[f64] {
        let (_, o, _, b) = self.layout.layers[l];
        &self.values[b..b + o]
    }

    pub fn layer_bias_mut(&mut self, l: usize) -> &mut [f64] {
        let (_, o, _, b) = self.layout.layers[l];
        &mut self.values[b..b + o]
    }

    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        let (i, o, _, _) = self.layout.layers[l];
        (i, o)
    }

    pub fn wide(&self) -> &[f64] {
        &self.values[self.layout.wide..self.layout.wide + self.layout.n_fixed_effects]
    }

    pub fn wide_mut(&mut self) -> &mut [f64] {
        let (a, n) = (self.layout.wide, self.layout.n_fixed_effects);
        &mut self.values[a..a + n]
    }

    pub fn merge(&self) -> &[f64] {
        &self.values[self.layout.merge..self.layout.merge + self.layout.last_width()]
    }

    pub fn merge_mut(&mut self) -> &mut [f64] {
        let (a, n) = (self.layout.merge, self.layout.last_width());
        &mut self.values[a..a + n]
    }

    pub fn output_bias(&self) -> f64 {
        self.values[self.layout.bias]
    }

    pub fn set_output_bias(&mut self, b: f64) {
        self.values[self.layout.bias] = b;
    }

    /// Sum of squared hidden-layer connection weights (the penalized set).
    pub fn hidden_weight_norm_sq(&self) -> f64 {
        (0..self.n_layers())
            .flat_map(|l| self.layer_weights(l).iter())
            .map(|w| w * w)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_spec(&self, spec: &DeepWideSpec) -> Result<()> {
        let expected = Layout::new(spec, self.layout.n_controls, self.layout.n_fixed_effects);
        if expected != self.layout {
            return Err(Error::Dimension("parameters do not match the network spec".into()));
        }
        Ok(())
    }

    /// Debug dump: layer-major, row-major weight arrays.
    pub fn to_json(&self) -> serde_json::Value {
        let layers: Vec<serde_json::Value> = (0..self.n_layers())
            .map(|l| {
                let (_, o) = self.layer_shape(l);
                let rows: Vec<&[f64]> = self.layer_weights(l).chunks(o).collect();
                serde_json::json!({ "weights": rows, "bias": self.layer_bias(l) })
            })
            .collect();
        serde_json::json!({
            "deep": layers,
            "wide": self.wide(),
            "merge": self.merge(),
            "bias": self.output_bias(),
        })
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(file, &self.to_json())?;
        Ok(())
    }
}

/// Scaled-uniform deep weights with bound sqrt(6 / (fan_in + fan_out));
/// wide weights, merge weights and all biases start at zero.
///
/// `k = 0` is accepted and yields a deep path that is constant in the input.
pub fn init_params(spec: &DeepWideSpec, k: usize, f: usize, seed: u64) -> Result<DeepWideParams> {
    spec.validate()?;
    if f == 0 {
        return Err(Error::InvalidArgument("wide path needs at least one column".into()));
    }
    let mut params = DeepWideParams::zeros(spec, k, f);
    let mut rng = seed::rng_for(seed, seed::stream::INIT);
    for l in 0..params.n_layers() {
        let (i, o) = params.layer_shape(l);
        let bound = (6.0 / (i + o) as f64).sqrt();
        for w in params.layer_weights_mut(l) {
            *w = rng.gen_range(-bound..bound);
        }
    }
    Ok(params)
}

/// Row-major network inputs: controls (n x k) and fixed-effect dummies
/// (n x f).
#[derive(Debug, Clone, PartialEq)]
pub struct NetInputs {
    pub n_controls: usize,
    pub n_fixed_effects: usize,
    controls: Vec<f64>,
    fixed_effects: Vec<f64>,
}

impl NetInputs {
    pub fn new(controls: &DMatrix<f64>, fixed_effects: &DMatrix<f64>) -> Result<Self> {
        if controls.nrows() != fixed_effects.nrows() {
            return Err(Error::Dimension(format!(
                "controls have {} rows, fixed effects {}",
                controls.nrows(),
                fixed_effects.nrows()
            )));
        }
        Ok(NetInputs {
            n_controls: controls.ncols(),
            n_fixed_effects: fixed_effects.ncols(),
            controls: controls.transpose().as_slice().to_vec(),
            fixed_effects: fixed_effects.transpose().as_slice().to_vec(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.fixed_effects.len() / self.n_fixed_effects.max(1)
    }

    pub fn controls_row(&self, i: usize) -> &[f64] {
        &self.controls[i * self.n_controls..(i + 1) * self.n_controls]
    }

    pub fn fe_row(&self, i: usize) -> &[f64] {
        &self.fixed_effects[i * self.n_fixed_effects..(i + 1) * self.n_fixed_effects]
    }

    fn check(&self, params: &DeepWideParams) -> Result<()> {
        if self.n_controls != params.layout.n_controls || self.n_fixed_effects != params.layout.n_fixed_effects {
            return Err(Error::Dimension(format!(
                "inputs have {} controls and {} fixed-effect columns, network expects {} and {}",
                self.n_controls, self.n_fixed_effects, params.layout.n_controls, params.layout.n_fixed_effects
            )));
        }
        Ok(())
    }
}

/// Scratch buffers for one forward/backward pass.
struct Workspace {
    /// Pre-activations per layer.
    pre: Vec<Vec<f64>>,
    /// Activations per layer.
    act: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(layout: &Layout) -> Self {
        let widths: Vec<usize> = layout.layers.iter().map(|l| l.1).collect();
        Workspace {
            pre: widths.iter().map(|&w| vec![0.0; w]).collect(),
            act: widths.iter().map(|&w| vec![0.0; w]).collect(),
            delta: widths.iter().map(|&w| vec![0.0; w]).collect(),
        }
    }
}

fn forward_into(
    values: &[f64],
    layout: &Layout,
    activation: Activation,
    x: &[f64],
    fe: &[f64],
    ws: &mut Workspace,
) -> f64 {
    for (l, &(fan_in, fan_out, w, b)) in layout.layers.iter().enumerate() {
        let z = &mut ws.pre[l];
        z.copy_from_slice(&values[b..b + fan_out]);
        let input: &[f64] = if l == 0 { x } else { &ws.act[l - 1] };
        let weights = &values[w..w + fan_in * fan_out];
        for (i, &xi) in input.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &weights[i * fan_out..(i + 1) * fan_out];
            for (zj, &wij) in z.iter_mut().zip(row) {
                *zj += xi * wij;
            }
        }
        let a = &mut ws.act[l];
        for (aj, &zj) in a.iter_mut().zip(z.iter()) {
            *aj = activation.apply(zj);
        }
    }
    let last = ws.act.last().expect("at least one layer");
    let merge = &values[layout.merge..layout.merge + last.len()];
    let mut out = values[layout.bias];
    out += last.iter().zip(merge).map(|(a, m)| a * m).sum::<f64>();
    let wide = &values[layout.wide..layout.wide + layout.n_fixed_effects];
    for (&d, &w) in fe.iter().zip(wide) {
        if d != 0.0 {
            out += d * w;
        }
    }
    out
}

/// Accumulates `scale * d(output)/d(params)` for the row last passed
/// through `forward_into`.
fn backward_into(
    values: &[f64],
    layout: &Layout,
    activation: Activation,
    x: &[f64],
    fe: &[f64],
    scale: f64,
    ws: &mut Workspace,
    grad: &mut [f64],
) {
    grad[layout.bias] += scale;
    let wide = layout.wide;
    for (j, &d) in fe.iter().enumerate() {
        if d != 0.0 {
            grad[wide + j] += scale * d;
        }
    }
    let n_layers = layout.layers.len();
    let last_w = layout.last_width();
    for j in 0..last_w {
        grad[layout.merge + j] += scale * ws.act[n_layers - 1][j];
        ws.delta[n_layers - 1][j] =
            scale * values[layout.merge + j] * activation.derivative(ws.pre[n_layers - 1][j]);
    }
    for l in (0..n_layers).rev() {
        let (fan_in, fan_out, w, b) = layout.layers[l];
        let (lower, upper) = ws.delta.split_at_mut(l);
        let delta = &upper[0];
        for (g, &d) in grad[b..b + fan_out].iter_mut().zip(delta.iter()) {
            *g += d;
        }
        let input: &[f64] = if l == 0 { x } else { &ws.act[l - 1] };
        for (i, &xi) in input.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let g_row = &mut grad[w + i * fan_out..w + (i + 1) * fan_out];
            for (g, &d) in g_row.iter_mut().zip(delta.iter()) {
                *g += xi * d;
            }
        }
        if l > 0 {
            let weights = &values[w..w + fan_in * fan_out];
            let below = &mut lower[l - 1];
            for i in 0..fan_in {
                let row = &weights[i * fan_out..(i + 1) * fan_out];
                let s: f64 = row.iter().zip(delta.iter()).map(|(a, b)| a * b).sum();
                below[i] = s * activation.derivative(ws.pre[l - 1][i]);
            }
        }
    }
}

/// Network output for one row.
pub fn forward(params: &DeepWideParams, spec: &DeepWideSpec, controls_row: &[f64], fe_row: &[f64]) -> Result<f64> {
    params.check_spec(spec)?;
    if controls_row.len() != params.layout.n_controls || fe_row.len() != params.layout.n_fixed_effects {
        return Err(Error::Dimension(format!(
            "row has {} controls and {} fixed-effect columns, network expects {} and {}",
            controls_row.len(),
            fe_row.len(),
            params.layout.n_controls,
            params.layout.n_fixed_effects
        )));
    }
    let mut ws = Workspace::new(&params.layout);
    Ok(forward_into(
        &params.values,
        &params.layout,
        spec.hidden_activation,
        controls_row,
        fe_row,
        &mut ws,
    ))
}

/// Predictions for every row of `inputs`.
pub fn predict(params: &DeepWideParams, spec: &DeepWideSpec, inputs: &NetInputs) -> Result<Vec<f64>> {
    params.check_spec(spec)?;
    inputs.check(params)?;
    let mut ws = Workspace::new(&params.layout);
    Ok((0..inputs.n_rows())
        .map(|i| {
            forward_into(
                &params.values,
                &params.layout,
                spec.hidden_activation,
                inputs.controls_row(i),
                inputs.fe_row(i),
                &mut ws,
            )
        })
        .collect())
}

/// Mean absolute error over `rows` (no penalty).
fn mae_on(params: &DeepWideParams, spec: &DeepWideSpec, inputs: &NetInputs, targets: &[f64], rows: &[usize], ws: &mut Workspace) -> f64 {
    let sum: f64 = rows
        .iter()
        .map(|&i| {
            let pred = forward_into(
                &params.values,
                &params.layout,
                spec.hidden_activation,
                inputs.controls_row(i),
                inputs.fe_row(i),
                ws,
            );
            (pred - targets[i]).abs()
        })
        .sum();
    sum / rows.len() as f64
}

fn loss_and_gradient_into(
    params: &DeepWideParams,
    spec: &DeepWideSpec,
    inputs: &NetInputs,
    targets: &[f64],
    rows: &[usize],
    l2: f64,
    ws: &mut Workspace,
    grad: &mut [f64],
) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let layout = &params.layout;
    let values = &params.values;
    let inv_n = 1.0 / rows.len() as f64;
    let mut abs_sum = 0.0;
    for &i in rows {
        let x = inputs.controls_row(i);
        let fe = inputs.fe_row(i);
        let pred = forward_into(values, layout, spec.hidden_activation, x, fe, ws);
        let r = pred - targets[i];
        abs_sum += r.abs();
        // Subgradient 0 at an exactly zero residual.
        let s = if r > 0.0 {
            inv_n
        } else if r < 0.0 {
            -inv_n
        } else {
            continue;
        };
        backward_into(values, layout, spec.hidden_activation, x, fe, s, ws, grad);
    }
    let mut penalty = 0.0;
    if l2 != 0.0 {
        for &(fan_in, fan_out, w, _) in &layout.layers {
            for idx in w..w + fan_in * fan_out {
                penalty += values[idx] * values[idx];
                grad[idx] += 2.0 * l2 * values[idx];
            }
        }
    }
    abs_sum * inv_n + l2 * penalty
}

/// MAE over the batch plus `l2` times the squared hidden-layer weights, and
/// its gradient.
pub fn loss_and_gradient(
    params: &DeepWideParams,
    spec: &DeepWideSpec,
    inputs: &NetInputs,
    targets: &[f64],
    rows: &[usize],
    l2: f64,
) -> Result<(f64, DeepWideParams)> {
    params.check_spec(spec)?;
    inputs.check(params)?;
    if rows.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if targets.len() != inputs.n_rows() {
        return Err(Error::Dimension("one target per input row required".into()));
    }
    let mut ws = Workspace::new(&params.layout);
    let mut grads = DeepWideParams {
        layout: params.layout.clone(),
        values: vec![0.0; params.values.len()],
    };
    let loss = loss_and_gradient_into(params, spec, inputs, targets, rows, l2, &mut ws, &mut grads.values);
    Ok((loss, grads))
}

/// First and second moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected adaptive-moment update at step `t` (1-based).
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, t: u64, cfg: &TrainConfig) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidArgument("adam step index starts at 1".into()));
    }
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Dimension("adam state, gradient and parameters differ in length".into()));
    }
    let (b1, b2) = (cfg.moment1_decay, cfg.moment2_decay);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainTrace {
    /// Training-set MAE after each epoch (index 0 is epoch 1).
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    /// 1-based; 0 means the initial parameters were kept.
    pub selected_epoch: usize,
}

impl TrainTrace {
    pub fn epochs_run(&self) -> usize {
        self.train_loss.len()
    }
}

/// Picks the epoch (1-based) with the smallest train/validation gap among
/// those whose validation loss is within `band` of the best.
pub fn select_epoch(train: &[f64], validation: &[f64], band: f64) -> usize {
    let best = validation.iter().copied().fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return 0;
    }
    let limit = best * (1.0 + band);
    let mut chosen = 0;
    let mut gap = f64::INFINITY;
    for (e, (&tr, &va)) in train.iter().zip(validation).enumerate() {
        if va <= limit && (tr - va).abs() < gap {
            gap = (tr - va).abs();
            chosen = e + 1;
        }
    }
    chosen
}

/// Trains a fresh network on `split.train`, monitoring `split.validation`.
///
/// Runs up to `cfg.max_epochs` with mini-batches reshuffled each epoch,
/// stops after `cfg.patience` epochs without a new best validation loss, and
/// returns the parameters of the epoch chosen by [`select_epoch`].
pub fn train(
    spec: &DeepWideSpec,
    cfg: &TrainConfig,
    inputs: &NetInputs,
    targets: &[f64],
    split: &TrainValSplit,
) -> Result<(DeepWideParams, TrainTrace)> {
    cfg.validate()?;
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(Error::InvalidArgument("training and validation rows must be non-empty".into()));
    }
    if targets.len() != inputs.n_rows() {
        return Err(Error::Dimension("one target per input row required".into()));
    }
    let mut params = init_params(spec, inputs.n_controls, inputs.n_fixed_effects, cfg.seed)?;
    let mut ws = Workspace::new(&params.layout);
    let mut grad = vec![0.0; params.values.len()];
    let mut state = AdamState::new(params.values.len());
    let mut rng = seed::rng_for(cfg.seed, seed::stream::SHUFFLE);
    let mut order = split.train.clone();
    let mut snapshots: Vec<Vec<f64>> = Vec::new();
    let mut trace = TrainTrace {
        train_loss: Vec::new(),
        validation_loss: Vec::new(),
        selected_epoch: 0,
    };
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut step: u64 = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let loss = loss_and_gradient_into(&params, spec, inputs, targets, batch, spec.l2_penalty, &mut ws, &mut grad);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            step += 1;
            adam_step(&mut params.values, &grad, &mut state, step, cfg)?;
        }
        let tr = mae_on(&params, spec, inputs, targets, &split.train, &mut ws);
        let va = mae_on(&params, spec, inputs, targets, &split.validation, &mut ws);
        if !tr.is_finite() || !va.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        trace.train_loss.push(tr);
        trace.validation_loss.push(va);
        snapshots.push(params.values.clone());
        if va < best {
            best = va;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    trace.selected_epoch = select_epoch(&trace.train_loss, &trace.validation_loss, cfg.selection_band);
    if trace.selected_epoch > 0 {
        params.values = snapshots.swap_remove(trace.selected_epoch - 1);
    }
    Ok((params, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_inputs(n: usize, k: usize, f: usize, seed: u64) -> (NetInputs, Vec<f64>) {
        let mut rng = seed::rng(seed);
        let x = DMatrix::from_fn(n, k, |_, _| rng.gen_range(-1.0..1.0));
        let fe = DMatrix::from_fn(n, f, |_, j| if j == 0 { 1.0 } else if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
        let y = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (NetInputs::new(&x, &fe).unwrap(), y)
    }

    #[test]
    fn init_shapes_match_architecture() {
        let p = init_params(&DeepWideSpec::default(), 947, 295, 1).unwrap();
        assert_eq!(p.layer_shape(0), (947, 16));
        assert_eq!(p.layer_shape(1), (16, 8));
        assert_eq!(p.wide().len(), 295);
        assert_eq!(p.merge().len(), 8);
        assert!(p.wide().iter().all(|&w| w == 0.0));
        assert!(p.layer_bias(0).iter().all(|&b| b == 0.0));
        assert_eq!(p, init_params(&DeepWideSpec::default(), 947, 295, 1).unwrap());
        assert_ne!(p, init_params(&DeepWideSpec::default(), 947, 295, 2).unwrap());
    }

    #[test]
    fn init_weights_are_centered() {
        // 947 * 16 + 16 * 8 + ... well above 1e5 draws across seeds.
        let spec = DeepWideSpec::default();
        let mut draws = Vec::new();
        for s in 0..7 {
            let p = init_params(&spec, 947, 3, s).unwrap();
            draws.extend_from_slice(p.layer_weights(0));
        }
        assert!(draws.len() >= 100_000);
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 3.0 * (var / n).sqrt(), "mean {mean}");
        let bound = (6.0f64 / (947.0 + 16.0)).sqrt();
        // Uniform(-b, b) variance is b^2 / 3.
        assert!((var - bound * bound / 3.0).abs() < 0.02 * bound * bound / 3.0);
    }

    #[test]
    fn zero_network_outputs_bias() {
        let spec = DeepWideSpec::default();
        let mut p = DeepWideParams::zeros(&spec, 3, 2);
        p.set_output_bias(0.7);
        assert_eq!(forward(&p, &spec, &[1.0, -2.0, 3.0], &[1.0, 1.0]).unwrap(), 0.7);
        assert_eq!(forward(&p, &spec, &[0.0, 0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.7);
    }

    #[test]
    fn identity_single_layer_is_affine() {
        let spec = DeepWideSpec {
            deep_layer_sizes: vec![4],
            hidden_activation: Activation::Identity,
            l2_penalty: 0.0,
        };
        let mut p = init_params(&spec, 3, 2, 5).unwrap();
        let mut rng = seed::rng(11);
        for v in p.as_mut_slice() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let x = [0.3, -1.2, 0.8];
        let fe = [1.0, 1.0];
        // y = merge' (W' x + b) + wide' fe + bias
        let w = DMatrix::from_row_slice(3, 4, p.layer_weights(0));
        let b = nalgebra::DVector::from_column_slice(p.layer_bias(0));
        let h = w.transpose() * nalgebra::DVector::from_column_slice(&x) + b;
        let expected = h.dot(&nalgebra::DVector::from_column_slice(p.merge()))
            + p.wide()[0] * fe[0]
            + p.wide()[1] * fe[1]
            + p.output_bias();
        let got = forward(&p, &spec, &x, &fe).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn wide_dummy_flip_adds_its_weight() {
        let spec = DeepWideSpec::default();
        let mut p = init_params(&spec, 3, 4, 2).unwrap();
        p.wide_mut().copy_from_slice(&[0.1, -0.4, 0.25, 2.0]);
        p.merge_mut().iter_mut().enumerate().for_each(|(i, m)| *m = 0.1 * i as f64);
        let x = [0.5, 0.1, -0.3];
        let a = forward(&p, &spec, &x, &[1.0, 0.0, 1.0, 0.0]).unwrap();
        let b = forward(&p, &spec, &x, &[1.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(((b - a) - (-0.4)).abs() < 1e-14);
    }

    #[test]
    fn dimension_mismatch_errors() {
        let spec = DeepWideSpec::default();
        let p = init_params(&spec, 3, 2, 0).unwrap();
        assert!(matches!(forward(&p, &spec, &[1.0], &[1.0, 0.0]), Err(Error::Dimension(_))));
        let (inputs, _) = random_inputs(5, 4, 2, 0);
        assert!(matches!(predict(&p, &spec, &inputs), Err(Error::Dimension(_))));
        let other = DeepWideSpec { deep_layer_sizes: vec![5], ..spec.clone() };
        assert!(matches!(forward(&p, &other, &[1.0, 2.0, 3.0], &[1.0, 0.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn perfect_predictions_have_zero_loss_and_data_gradient() {
        let spec = DeepWideSpec::default();
        let p = init_params(&spec, 3, 2, 4).unwrap();
        let (inputs, _) = random_inputs(10, 3, 2, 1);
        let y = predict(&p, &spec, &inputs).unwrap();
        let rows: Vec<usize> = (0..10).collect();
        let (loss, g) = loss_and_gradient(&p, &spec, &inputs, &y, &rows, 0.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn penalty_is_linear_in_l2() {
        let spec = DeepWideSpec::default();
        let p = init_params(&spec, 3, 2, 4).unwrap();
        let (inputs, y) = random_inputs(10, 3, 2, 1);
        let rows: Vec<usize> = (0..10).collect();
        let (l0, _) = loss_and_gradient(&p, &spec, &inputs, &y, &rows, 0.0).unwrap();
        let (l1, _) = loss_and_gradient(&p, &spec, &inputs, &y, &rows, 0.05).unwrap();
        let (l2, _) = loss_and_gradient(&p, &spec, &inputs, &y, &rows, 0.1).unwrap();
        assert!(((l2 - l0) - 2.0 * (l1 - l0)).abs() < 1e-14);
        assert!(((l1 - l0) - 0.05 * p.hidden_weight_norm_sq()).abs() < 1e-14);
        assert!(loss_and_gradient(&p, &spec, &inputs, &y, &[], 0.0).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let cfg = TrainConfig::default();
        let mut p = vec![0.3, -1.0];
        let mut st = AdamState::new(2);
        for t in 1..=10 {
            adam_step(&mut p, &[0.0, 0.0], &mut st, t, &cfg).unwrap();
        }
        assert_eq!(p, vec![0.3, -1.0]);
        assert!(adam_step(&mut p, &[0.0, 0.0], &mut st, 0, &cfg).is_err());
    }

    #[test]
    fn adam_first_step_by_hand() {
        let cfg = TrainConfig::default();
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut st, 1, &cfg).unwrap();
        assert!((p[0] - (-0.001 * (1.0 / (1.0 + 1e-8)))).abs() < 1e-12);
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_learning_rate() {
        let cfg = TrainConfig::default();
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        let mut last = 0.0;
        for t in 1..=5000 {
            let before = p[0];
            adam_step(&mut p, &[3.5], &mut st, t, &cfg).unwrap();
            last = p[0] - before;
        }
        assert!((last.abs() - cfg.learning_rate).abs() < 1e-9, "{last}");
        assert!(last < 0.0);
    }

    #[test]
    fn epoch_selection_rule() {
        // best validation 1.0 at epoch 3; band admits epochs 2..=4 (<= 1.05).
        let train = [2.0, 1.04, 0.9, 0.5, 0.4];
        let val = [2.1, 1.05, 1.0, 1.02, 1.2];
        assert_eq!(select_epoch(&train, &val, 0.05), 2);
        assert_eq!(select_epoch(&train, &val, 0.0), 3);
        assert_eq!(select_epoch(&[], &[], 0.05), 0);
    }

    #[test]
    fn zero_epochs_keeps_initial_parameters() {
        let spec = DeepWideSpec::default();
        let cfg = TrainConfig { max_epochs: 0, seed: 3, ..TrainConfig::default() };
        let (inputs, y) = random_inputs(20, 3, 2, 1);
        let split = crate::panel::split_train_val(&(0..20).collect::<Vec<_>>(), 0).unwrap();
        let (p, trace) = train(&spec, &cfg, &inputs, &y, &split).unwrap();
        assert_eq!(trace.selected_epoch, 0);
        assert_eq!(p, init_params(&spec, 3, 2, 3).unwrap());
        let pred = predict(&p, &spec, &inputs).unwrap();
        assert!(pred.iter().all(|&v| v == pred[0]));
    }

    #[test]
    fn predict_matches_forward_and_permutes() {
        let spec = DeepWideSpec::default();
        let mut p = init_params(&spec, 3, 2, 4).unwrap();
        p.merge_mut().iter_mut().for_each(|m| *m = 0.5);
        let (inputs, _) = random_inputs(6, 3, 2, 8);
        let pred = predict(&p, &spec, &inputs).unwrap();
        for i in 0..6 {
            assert_eq!(pred[i], forward(&p, &spec, inputs.controls_row(i), inputs.fe_row(i)).unwrap());
        }
    }
}
