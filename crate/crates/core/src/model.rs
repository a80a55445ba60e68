//! Function classes, the bounded loss and risk evaluation.
//!
//! A configuration with `depth = 0` is a linear scorer `⟨w, x⟩ + b`;
//! otherwise a fully connected ReLU network with `depth` hidden layers of
//! `width` units and a scalar output. Parameters live in one flat vector,
//! layer by layer: the `fan_in × fan_out` weight matrix in row-major order
//! followed by the `fan_out` biases.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{generate_with, DataSpec, Dataset};
use crate::error::{config_err, Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub depth: usize,
    pub width: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl HyperParams {
    pub fn new(depth: usize, width: usize, learning_rate: f64, batch_size: usize) -> Result<Self> {
        let hp = HyperParams {
            depth,
            width: if depth == 0 { 0 } else { width },
            learning_rate,
            batch_size,
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn linear(learning_rate: f64, batch_size: usize) -> Self {
        HyperParams {
            depth: 0,
            width: 0,
            learning_rate,
            batch_size,
        }
    }

    /// Canonical form: width is irrelevant for linear models.
    pub fn normalized(mut self) -> Self {
        if self.depth == 0 {
            self.width = 0;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth > 0 && self.width == 0 {
            return config_err("hidden layers need a positive width");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return config_err(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return config_err("batch size must be positive");
        }
        Ok(())
    }

    /// Layer sizes from input to the scalar output.
    pub fn layer_sizes(&self, n_features: usize) -> Vec<usize> {
        let mut sizes = vec![n_features];
        sizes.extend(std::iter::repeat_n(self.width, self.depth));
        sizes.push(1);
        sizes
    }

    pub fn param_count(&self, n_features: usize) -> usize {
        self.layer_sizes(n_features)
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

impl std::fmt::Display for HyperParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "depth={} width={} lr={} batch={}",
            self.depth, self.width, self.learning_rate, self.batch_size
        )
    }
}

/// The finite set of candidate configurations, in a fixed order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<HyperParams>", into = "Vec<HyperParams>")]
pub struct HpGrid {
    configs: Vec<HyperParams>,
}

impl TryFrom<Vec<HyperParams>> for HpGrid {
    type Error = Error;
    fn try_from(v: Vec<HyperParams>) -> Result<Self> {
        HpGrid::new(v)
    }
}

impl From<HpGrid> for Vec<HyperParams> {
    fn from(g: HpGrid) -> Self {
        g.configs
    }
}

impl HpGrid {
    pub fn new(configs: Vec<HyperParams>) -> Result<Self> {
        if configs.is_empty() {
            return config_err("grid must contain at least one configuration");
        }
        let configs: Vec<HyperParams> = configs.into_iter().map(HyperParams::normalized).collect();
        for (i, c) in configs.iter().enumerate() {
            c.validate()?;
            if configs[..i].contains(c) {
                return config_err(format!("duplicate configuration {c}"));
            }
        }
        Ok(HpGrid { configs })
    }

    /// depth ∈ {1,2,3} × width ∈ {10,100} × lr ∈ {0.01,0.1} × batch ∈ {8,32,128}.
    pub fn grid36() -> Self {
        Self::product(&[1, 2, 3], &[10, 100], &[0.01, 0.1], &[8, 32, 128])
    }

    /// The 36-point grid restricted to width 10.
    pub fn grid18() -> Self {
        Self::product(&[1, 2, 3], &[10], &[0.01, 0.1], &[8, 32, 128])
    }

    /// Linear models only: lr ∈ {0.01,0.1} × batch ∈ {8,32,128}.
    pub fn linear() -> Self {
        Self::product(&[0], &[0], &[0.01, 0.1], &[8, 32, 128])
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "grid36" => Ok(Self::grid36()),
            "grid18" => Ok(Self::grid18()),
            "linear" => Ok(Self::linear()),
            other => config_err(format!("unknown grid '{other}'")),
        }
    }

    fn product(depths: &[usize], widths: &[usize], lrs: &[f64], batches: &[usize]) -> Self {
        let mut configs = Vec::new();
        for &depth in depths {
            for &width in widths {
                for &learning_rate in lrs {
                    for &batch_size in batches {
                        configs.push(HyperParams {
                            depth,
                            width,
                            learning_rate,
                            batch_size,
                        });
                    }
                }
            }
        }
        HpGrid::new(configs).expect("static grid is valid")
    }

    pub fn configs(&self) -> &[HyperParams] {
        &self.configs
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    ClippedLogistic,
    ZeroOne,
}

/// A bounded loss on margins `y·s`.
///
/// `clipped_logistic` is `B · min(1, softplus(-y·s) / softplus(z₀))` with
/// `z₀ = clip_margin`: the log-loss rescaled so it reaches `B` exactly at
/// margin `-z₀` and saturates beyond. `zero_one` is `B·[y·s ≤ 0]`, so a tie
/// counts as an error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSpec {
    pub kind: LossKind,
    pub bound: f64,
    pub clip_margin: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec::clipped_logistic(1.0)
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LossSpec {
    pub const DEFAULT_CLIP_MARGIN: f64 = 2.0;

    pub fn clipped_logistic(bound: f64) -> Self {
        LossSpec {
            kind: LossKind::ClippedLogistic,
            bound,
            clip_margin: Self::DEFAULT_CLIP_MARGIN,
        }
    }

    pub fn zero_one(bound: f64) -> Self {
        LossSpec {
            kind: LossKind::ZeroOne,
            bound,
            clip_margin: Self::DEFAULT_CLIP_MARGIN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bound > 0.0 && self.bound.is_finite()) {
            return config_err("loss bound must be positive");
        }
        if self.kind == LossKind::ClippedLogistic && !self.clip_margin.is_finite() {
            return config_err("clip margin must be finite");
        }
        Ok(())
    }

    /// Smallest Lipschitz constant of the loss in the score.
    ///
    /// The slope of the unclipped part grows monotonically towards the clip
    /// point, so the supremum is attained just before saturation. The zero-one
    /// loss is not Lipschitz; `+∞` is returned.
    pub fn lipschitz_beta(&self) -> f64 {
        match self.kind {
            LossKind::ClippedLogistic => {
                self.bound * sigmoid(self.clip_margin) / softplus(self.clip_margin)
            }
            LossKind::ZeroOne => f64::INFINITY,
        }
    }

    #[inline]
    pub fn value(&self, y: f64, s: f64) -> f64 {
        match self.kind {
            LossKind::ClippedLogistic => {
                let raw = softplus(-y * s) / softplus(self.clip_margin);
                self.bound * raw.min(1.0)
            }
            LossKind::ZeroOne => {
                if y * s <= 0.0 {
                    self.bound
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative of the loss in `s`; zero in the saturated region and for 0-1.
    #[inline]
    pub fn derivative(&self, y: f64, s: f64) -> f64 {
        match self.kind {
            LossKind::ClippedLogistic => {
                let z = -y * s;
                let norm = softplus(self.clip_margin);
                if softplus(z) < norm {
                    -y * sigmoid(z) * self.bound / norm
                } else {
                    0.0
                }
            }
            LossKind::ZeroOne => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub hp: HyperParams,
    pub n_features: usize,
    pub params: Vec<f64>,
}

/// PyTorch-style initialization: every weight and bias of a layer with
/// fan-in `k` is drawn from `U(-1/√k, 1/√k)`.
pub fn init_model(hp: &HyperParams, n_features: usize, init_seed: u64) -> Result<Model> {
    hp.validate()?;
    if n_features == 0 {
        return config_err("model needs at least one input feature");
    }
    let hp = hp.normalized();
    let mut rng = rng::seeded(init_seed);
    let mut params = Vec::with_capacity(hp.param_count(n_features));
    for w in hp.layer_sizes(n_features).windows(2) {
        let bound = 1.0 / (w[0] as f64).sqrt();
        for _ in 0..(w[0] * w[1] + w[1]) {
            params.push(rng.gen_range(-bound..bound));
        }
    }
    Ok(Model {
        hp,
        n_features,
        params,
    })
}

/// Rows scored per forward pass during evaluation.
const EVAL_CHUNK: usize = 2048;

impl Model {
    pub fn from_params(hp: HyperParams, n_features: usize, params: Vec<f64>) -> Result<Self> {
        let hp = hp.normalized();
        let expected = hp.param_count(n_features);
        if params.len() != expected {
            return Err(Error::Domain(format!(
                "expected {expected} parameters for {hp}, got {}",
                params.len()
            )));
        }
        Ok(Model {
            hp,
            n_features,
            params,
        })
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.hp.layer_sizes(self.n_features)
    }

    pub fn score_one(&self, x: ArrayView1<f64>) -> f64 {
        let row = x.insert_axis(Axis(0));
        self.scores(row)[0]
    }

    pub fn scores(&self, x: ArrayView2<f64>) -> Array1<f64> {
        let mut ws = Workspace::new(self, x.nrows().min(EVAL_CHUNK));
        let mut out = Array1::zeros(x.nrows());
        let mut start = 0;
        while start < x.nrows() {
            let end = (start + EVAL_CHUNK).min(x.nrows());
            let s = ws.forward(self, x.slice(s![start..end, ..]));
            out.slice_mut(s![start..end]).assign(&s);
            start = end;
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Model = serde_json::from_str(text)?;
        Model::from_params(m.hp, m.n_features, m.params)
    }
}

fn layer_view(params: &[f64], offset: usize, fan_in: usize, fan_out: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
    let w = ArrayView2::from_shape((fan_in, fan_out), &params[offset..offset + fan_in * fan_out])
        .expect("layer shape");
    let b = ArrayView1::from(&params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out]);
    (w, b)
}

/// Scratch buffers for forward and backward passes on one architecture.
pub struct Workspace {
    sizes: Vec<usize>,
    /// Post-activation outputs of every layer (the last one holds raw scores).
    acts: Vec<Array2<f64>>,
    deltas: Vec<Array2<f64>>,
}

impl Workspace {
    pub fn new(model: &Model, max_rows: usize) -> Self {
        let sizes = model.layer_sizes();
        let acts = sizes[1..].iter().map(|&k| Array2::zeros((max_rows, k))).collect();
        let deltas = sizes[1..].iter().map(|&k| Array2::zeros((max_rows, k))).collect();
        Workspace { sizes, acts, deltas }
    }

    fn ensure_rows(&mut self, rows: usize) {
        if self.acts[0].nrows() < rows {
            for (a, &k) in self.acts.iter_mut().zip(&self.sizes[1..]) {
                *a = Array2::zeros((rows, k));
            }
            for (d, &k) in self.deltas.iter_mut().zip(&self.sizes[1..]) {
                *d = Array2::zeros((rows, k));
            }
        }
    }

    /// Scores for the rows of `x`; the returned view borrows the workspace.
    pub fn forward(&mut self, model: &Model, x: ArrayView2<f64>) -> ArrayView1<'_, f64> {
        let rows = x.nrows();
        self.ensure_rows(rows);
        let layers = self.sizes.len() - 1;
        let mut offset = 0;
        for l in 0..layers {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w, b) = layer_view(&model.params, offset, fan_in, fan_out);
            offset += fan_in * fan_out + fan_out;
            let (prev, rest) = self.acts.split_at_mut(l);
            let mut out = rest[0].slice_mut(s![..rows, ..]);
            out.assign(&b.broadcast((rows, fan_out)).expect("bias broadcast"));
            if l == 0 {
                general_mat_mul(1.0, &x, &w, 1.0, &mut out);
            } else {
                let input = prev[l - 1].slice(s![..rows, ..]);
                general_mat_mul(1.0, &input, &w, 1.0, &mut out);
            }
            if l + 1 < layers {
                out.mapv_inplace(|v| v.max(0.0));
            }
        }
        self.acts[layers - 1].slice(s![..rows, 0])
    }

    /// Mean loss over the batch and its gradient, written into `grad`.
    pub fn loss_and_grad(
        &mut self,
        model: &Model,
        x: ArrayView2<f64>,
        y: ArrayView1<f64>,
        loss: &LossSpec,
        grad: &mut [f64],
    ) -> f64 {
        let rows = x.nrows();
        let layers = self.sizes.len() - 1;
        self.forward(model, x);
        let inv = 1.0 / rows as f64;
        let mut total = 0.0;
        {
            let scores = self.acts[layers - 1].slice(s![..rows, 0]);
            let mut top = self.deltas[layers - 1].slice_mut(s![..rows, 0]);
            for i in 0..rows {
                total += loss.value(y[i], scores[i]);
                top[i] = loss.derivative(y[i], scores[i]) * inv;
            }
        }

        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }

        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let o = offsets[l];
            let (gw, gb) = grad[o..o + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            let mut gw = ArrayViewMut2::from_shape((fan_in, fan_out), gw).expect("grad shape");
            let (lower, upper) = self.deltas.split_at_mut(l);
            let delta = upper[0].slice(s![..rows, ..]);
            if l == 0 {
                general_mat_mul(1.0, &x.t(), &delta, 0.0, &mut gw);
            } else {
                let input = self.acts[l - 1].slice(s![..rows, ..]);
                general_mat_mul(1.0, &input.t(), &delta, 0.0, &mut gw);
            }
            for (g, col) in gb.iter_mut().zip(delta.columns()) {
                *g = col.sum();
            }
            if l > 0 {
                let (w, _) = layer_view(&model.params, o, fan_in, fan_out);
                let mut below = lower[l - 1].slice_mut(s![..rows, ..]);
                general_mat_mul(1.0, &delta, &w.t(), 0.0, &mut below);
                let act = self.acts[l - 1].slice(s![..rows, ..]);
                ndarray::Zip::from(&mut below).and(&act).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
        }
        total * inv
    }
}

/// Exact mean loss of `model` over `data`.
pub fn empirical_risk(model: &Model, data: &Dataset, loss: &LossSpec) -> Result<f64> {
    if data.count() == 0 {
        return Err(Error::Domain("empirical risk of an empty dataset".into()));
    }
    let mut ws = Workspace::new(model, data.count().min(EVAL_CHUNK));
    Ok(risk_with(&mut ws, model, data, loss))
}

pub(crate) fn risk_with(ws: &mut Workspace, model: &Model, data: &Dataset, loss: &LossSpec) -> f64 {
    let n = data.count();
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let s = ws.forward(model, data.features.slice(s![start..end, ..]));
        for (yi, si) in data.labels.slice(s![start..end]).iter().zip(s.iter()) {
            total += loss.value(*yi, *si);
        }
        start = end;
    }
    total / n as f64
}

/// Per-point losses, used for standard errors and paired comparisons.
pub fn pointwise_losses(model: &Model, data: &Dataset, loss: &LossSpec) -> Array1<f64> {
    let s = model.scores(data.features.view());
    ndarray::Zip::from(&s)
        .and(&data.labels)
        .map_collect(|&si, &yi| loss.value(yi, si))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub risk: f64,
    pub std_err: f64,
}

impl RiskEstimate {
    pub fn from_losses(losses: ArrayView1<f64>) -> Self {
        let n = losses.len() as f64;
        let mean = losses.sum() / n;
        let var = if losses.len() > 1 {
            losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        RiskEstimate {
            risk: mean,
            std_err: (var / n).sqrt(),
        }
    }
}

/// Smallest test sample accepted by [`true_risk_estimate`].
pub const MIN_TEST_COUNT: usize = 10_000;

/// Estimate the true risk on a fresh sample of `test_count` points.
pub fn true_risk_estimate(
    model: &Model,
    spec: &DataSpec,
    loss: &LossSpec,
    test_count: usize,
    eval_seed: u64,
) -> Result<RiskEstimate> {
    let test = TestSample::draw(spec, test_count, eval_seed)?;
    Ok(test.estimate(model, loss))
}

/// A fresh sample shared by several true-risk estimates.
#[derive(Clone, Debug)]
pub struct TestSample {
    pub data: Dataset,
}

impl TestSample {
    pub fn draw(spec: &DataSpec, test_count: usize, eval_seed: u64) -> Result<Self> {
        Self::draw_with_floor(spec, test_count, eval_seed, MIN_TEST_COUNT)
    }

    pub fn draw_with_floor(spec: &DataSpec, test_count: usize, eval_seed: u64, floor: usize) -> Result<Self> {
        if test_count < floor.max(1) {
            return config_err(format!("test sample of {test_count} is below the floor of {floor}"));
        }
        let geo = spec.geometry()?;
        let seed = rng::derive(eval_seed, rng::Stream::Eval, 0);
        Ok(TestSample {
            data: generate_with(spec, &geo, test_count, seed),
        })
    }

    pub fn estimate(&self, model: &Model, loss: &LossSpec) -> RiskEstimate {
        RiskEstimate::from_losses(pointwise_losses(model, &self.data, loss).view())
    }
}
