//! Next-POI recommender: a single-layer GRU over `[location embedding; time code]`
//! inputs whose initial state is a projection of the user embedding.
//!
//! Parameters live in one flat `Vec<f64>`; [`Layout`] maps parameter groups to
//! ranges so optimizers, clipping and finite-difference checks can treat the
//! model as a plain vector.

use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Visit;
use crate::error::{Error, Result};
use crate::seed::{rng_for, STREAM_INIT};

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
pub const CHECKPOINT_FORMAT: &str = "poiaudit-model/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TimeEncoding {
    ScalarAppend,
    /// `sin(2πjt), cos(2πjt)` for `j = 1..=k`.
    Sinusoidal { k: usize },
}

impl TimeEncoding {
    pub fn dim(&self) -> usize {
        match self {
            TimeEncoding::ScalarAppend => 1,
            TimeEncoding::Sinusoidal { k } => 2 * k,
        }
    }

    fn encode(&self, t: f64, out: &mut [f64]) {
        match self {
            TimeEncoding::ScalarAppend => out[0] = t,
            TimeEncoding::Sinusoidal { k } => {
                for j in 0..*k {
                    let w = std::f64::consts::TAU * (j + 1) as f64 * t;
                    out[2 * j] = w.sin();
                    out[2 * j + 1] = w.cos();
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub user_embed_dim: usize,
    pub loc_embed_dim: usize,
    pub hidden_dim: usize,
    pub time_encoding: TimeEncoding,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            user_embed_dim: 32,
            loc_embed_dim: 32,
            hidden_dim: 64,
            time_encoding: TimeEncoding::ScalarAppend,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.user_embed_dim == 0 || self.loc_embed_dim == 0 || self.hidden_dim == 0 || self.time_encoding.dim() == 0
        {
            return Err(Error::Config("model dimensions must be at least 1".into()));
        }
        Ok(())
    }
}

/// Offsets of each parameter group in the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub n_users: usize,
    pub n_locations: usize,
    pub du: usize,
    pub dl: usize,
    pub din: usize,
    pub h: usize,
    pub user_emb: usize,
    pub loc_emb: usize,
    pub w_x: usize,
    pub w_h: usize,
    pub b: usize,
    pub proj: usize,
    pub proj_b: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub total: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig, n_users: usize, n_locations: usize) -> Self {
        let (du, dl, h) = (cfg.user_embed_dim, cfg.loc_embed_dim, cfg.hidden_dim);
        let din = dl + cfg.time_encoding.dim();
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let user_emb = take(n_users * du);
        // One extra input row: the reserved MASK location.
        let loc_emb = take((n_locations + 1) * dl);
        let w_x = take(3 * h * din);
        let w_h = take(3 * h * h);
        let b = take(3 * h);
        let proj = take(h * du);
        let proj_b = take(h);
        let out_w = take(n_locations * h);
        let out_b = take(n_locations);
        Self {
            n_users,
            n_locations,
            du,
            dl,
            din,
            h,
            user_emb,
            loc_emb,
            w_x,
            w_h,
            b,
            proj,
            proj_b,
            out_w,
            out_b,
            total: off,
        }
    }

    pub fn groups(&self) -> Vec<(&'static str, Range<usize>)> {
        vec![
            ("user_embedding", self.user_emb..self.loc_emb),
            ("location_embedding", self.loc_emb..self.w_x),
            ("gru_input_weights", self.w_x..self.w_h),
            ("gru_hidden_weights", self.w_h..self.b),
            ("gru_bias", self.b..self.proj),
            ("user_projection", self.proj..self.proj_b),
            ("user_projection_bias", self.proj_b..self.out_w),
            ("output_weights", self.out_w..self.out_b),
            ("output_bias", self.out_b..self.total),
        ]
    }
}

/// Logits and softmax probabilities for one prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probabilities = softmax(&logits);
        Self { logits, probabilities }
    }
}

/// Outputs for every prefix of a query: `steps[i]` is the prediction after
/// the first `i + 1` check-ins.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryOutput {
    pub steps: Vec<Prediction>,
}

impl QueryOutput {
    pub fn last(&self) -> &Prediction {
        self.steps.last().expect("query output is never empty")
    }
}

/// One supervised example: predict `target` after `prefix`.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub user: usize,
    pub prefix: &'a [Visit],
    pub target: usize,
}

/// A gradient in the model's flat parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn l2_norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|g| *g *= s);
    }

    pub fn add_scaled(&mut self, other: &Gradient, s: f64) {
        axpy(s, &other.0, &mut self.0);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }
}

/// Black-box query access: next-location logits for a user and a prefix.
pub trait PoiOracle: Sync {
    fn n_users(&self) -> usize;
    fn n_locations(&self) -> usize;
    /// Logits after the full prefix.
    fn query(&self, user: usize, prefix: &[Visit]) -> Result<Vec<f64>>;
    /// Logits after every prefix `0..=i`.
    fn query_prefixes(&self, user: usize, prefix: &[Visit]) -> Result<Vec<Vec<f64>>> {
        (1..=prefix.len()).map(|i| self.query(user, &prefix[..i])).collect()
    }
}

#[derive(Clone, Debug)]
pub struct PoiModel {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) epoch: usize,
}

struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    hn: Vec<f64>,
}

struct Trace {
    h0: Vec<f64>,
    steps: Vec<StepCache>,
    h: Vec<f64>,
}

impl PoiModel {
    pub fn new(config: ModelConfig, n_users: usize, n_locations: usize) -> Result<Self> {
        config.validate()?;
        if n_users == 0 || n_locations == 0 {
            return Err(Error::Config("model needs at least one user and one location".into()));
        }
        let layout = Layout::new(&config, n_users, n_locations);
        let mut rng = rng_for(config.seed, &[STREAM_INIT]);
        let mut params = vec![0.0; layout.total];
        let mut fill = |range: Range<usize>, bound: f64| {
            for p in &mut params[range] {
                *p = rng.gen_range(-bound..bound);
            }
        };
        let l = &layout;
        fill(l.user_emb..l.loc_emb, (3.0 / l.du as f64).sqrt());
        fill(l.loc_emb..l.w_x, (3.0 / l.dl as f64).sqrt());
        fill(l.w_x..l.w_h, (6.0 / (l.din + l.h) as f64).sqrt());
        fill(l.w_h..l.b, (3.0 / l.h as f64).sqrt());
        fill(l.proj..l.proj_b, (6.0 / (l.du + l.h) as f64).sqrt());
        fill(l.out_w..l.out_b, (6.0 / (l.h + l.n_locations) as f64).sqrt());
        let rng = ChaCha8Rng::seed_from_u64(0);
        Ok(Self {
            config,
            layout,
            params,
            rng,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Location id reserved for redacted check-ins. Accepted as input only.
    pub fn mask_location(&self) -> usize {
        self.layout.n_locations
    }

    pub fn zero_output_layer(&mut self) {
        let l = &self.layout;
        self.params[l.out_w..l.total].iter_mut().for_each(|p| *p = 0.0);
    }

    fn check_input(&self, user: usize, prefix: &[Visit]) -> Result<()> {
        if user >= self.layout.n_users {
            return Err(Error::OutOfBounds {
                what: "user",
                index: user,
                bound: self.layout.n_users,
            });
        }
        if prefix.is_empty() {
            return Err(Error::Precondition("query prefix must contain at least one check-in".into()));
        }
        for v in prefix {
            if v.location > self.layout.n_locations {
                return Err(Error::OutOfBounds {
                    what: "location",
                    index: v.location,
                    bound: self.layout.n_locations,
                });
            }
            if !(0.0..=1.0).contains(&v.time) {
                return Err(Error::Precondition(format!("timestamp {} outside [0, 1]", v.time)));
            }
        }
        Ok(())
    }

    fn initial_state(&self, user: usize) -> Vec<f64> {
        let l = &self.layout;
        let p = &self.params;
        let emb = &p[l.user_emb + user * l.du..][..l.du];
        (0..l.h)
            .map(|i| (p[l.proj_b + i] + dot(&p[l.proj + i * l.du..][..l.du], emb)).tanh())
            .collect()
    }

    fn input(&self, v: &Visit) -> Vec<f64> {
        let l = &self.layout;
        let mut x = vec![0.0; l.din];
        x[..l.dl].copy_from_slice(&self.params[l.loc_emb + v.location * l.dl..][..l.dl]);
        self.config.time_encoding.encode(v.time, &mut x[l.dl..]);
        x
    }

    /// One GRU step. Returns the cache needed for backpropagation; the new
    /// hidden state is written into `h`.
    fn step(&self, v: &Visit, h: &mut Vec<f64>) -> StepCache {
        let l = &self.layout;
        let p = &self.params;
        let hd = l.h;
        let x = self.input(v);
        let mut z = vec![0.0; hd];
        let mut r = vec![0.0; hd];
        let mut n = vec![0.0; hd];
        let mut hn = vec![0.0; hd];
        for i in 0..hd {
            let wx = |g: usize| dot(&p[l.w_x + (g * hd + i) * l.din..][..l.din], &x);
            let wh = |g: usize| dot(&p[l.w_h + (g * hd + i) * hd..][..hd], h);
            z[i] = sigmoid(wx(0) + wh(0) + p[l.b + i]);
            r[i] = sigmoid(wx(1) + wh(1) + p[l.b + hd + i]);
            hn[i] = wh(2);
            n[i] = (wx(2) + r[i] * hn[i] + p[l.b + 2 * hd + i]).tanh();
        }
        let h_prev = std::mem::take(h);
        *h = (0..hd).map(|i| (1.0 - z[i]) * n[i] + z[i] * h_prev[i]).collect();
        StepCache { x, h_prev, z, r, n, hn }
    }

    fn output_logits(&self, h: &[f64]) -> Vec<f64> {
        let l = &self.layout;
        let p = &self.params;
        (0..l.n_locations)
            .map(|j| p[l.out_b + j] + dot(&p[l.out_w + j * l.h..][..l.h], h))
            .collect()
    }

    fn trace(&self, user: usize, prefix: &[Visit]) -> Trace {
        let h0 = self.initial_state(user);
        let mut h = h0.clone();
        let steps = prefix.iter().map(|v| self.step(v, &mut h)).collect();
        Trace { h0, steps, h }
    }

    /// Logits after every prefix of `prefix`.
    pub fn forward(&self, user: usize, prefix: &[Visit]) -> Result<QueryOutput> {
        Ok(QueryOutput {
            steps: self
                .prefix_logits(user, prefix)?
                .into_iter()
                .map(Prediction::from_logits)
                .collect(),
        })
    }

    pub fn prefix_logits(&self, user: usize, prefix: &[Visit]) -> Result<Vec<Vec<f64>>> {
        self.check_input(user, prefix)?;
        let mut h = self.initial_state(user);
        Ok(prefix
            .iter()
            .map(|v| {
                self.step(v, &mut h);
                self.output_logits(&h)
            })
            .collect())
    }

    /// Logits after the whole prefix only.
    pub fn logits(&self, user: usize, prefix: &[Visit]) -> Result<Vec<f64>> {
        self.check_input(user, prefix)?;
        Ok(self.output_logits(&self.trace(user, prefix).h))
    }

    pub fn predict(&self, user: usize, prefix: &[Visit]) -> Result<Prediction> {
        self.logits(user, prefix).map(Prediction::from_logits)
    }

    fn check_target(&self, target: usize) -> Result<()> {
        if target >= self.layout.n_locations {
            return Err(Error::OutOfBounds {
                what: "target location",
                index: target,
                bound: self.layout.n_locations,
            });
        }
        Ok(())
    }

    /// Cross-entropy `-ln p(target | user, prefix)` with the probability floor.
    pub fn loss(&self, user: usize, prefix: &[Visit], target: usize) -> Result<f64> {
        self.check_target(target)?;
        Ok(neg_log_prob(&self.logits(user, prefix)?, target))
    }

    /// Sum of `-ln p(l_i | prefix 0..i)` for `i = 1..n`.
    pub fn log_perplexity(&self, user: usize, trajectory: &[Visit]) -> Result<f64> {
        if trajectory.len() < 2 {
            return Err(Error::Precondition("log perplexity needs at least two check-ins".into()));
        }
        for v in &trajectory[1..] {
            self.check_target(v.location)?;
        }
        let outputs = self.prefix_logits(user, &trajectory[..trajectory.len() - 1])?;
        Ok(outputs
            .iter()
            .zip(&trajectory[1..])
            .map(|(logits, v)| neg_log_prob(logits, v.location))
            .sum())
    }

    fn check_example(&self, ex: &Example) -> Result<()> {
        self.check_input(ex.user, ex.prefix)?;
        self.check_target(ex.target)
    }

    /// Adds `scale * d loss(ex) / d params` into `grad` and returns the loss.
    fn accumulate_example(&self, ex: &Example, scale: f64, grad: &mut [f64]) -> f64 {
        let l = &self.layout;
        let p = &self.params;
        let hd = l.h;
        let trace = self.trace(ex.user, ex.prefix);
        let logits = self.output_logits(&trace.h);
        let probs = softmax(&logits);
        let pt = probs[ex.target];
        let loss = -pt.max(PROB_FLOOR).ln();
        if pt < PROB_FLOOR {
            return loss;
        }

        // Output layer.
        let mut dh = vec![0.0; hd];
        for (j, &pj) in probs.iter().enumerate() {
            let dlogit = scale * (pj - if j == ex.target { 1.0 } else { 0.0 });
            if dlogit == 0.0 {
                continue;
            }
            grad[l.out_b + j] += dlogit;
            let row = l.out_w + j * hd;
            axpy(dlogit, &trace.h, &mut grad[row..row + hd]);
            axpy(dlogit, &p[row..row + hd], &mut dh);
        }

        // Backpropagation through time.
        let mut daz = vec![0.0; hd];
        let mut dar = vec![0.0; hd];
        let mut dan = vec![0.0; hd];
        let mut dhn = vec![0.0; hd];
        for (v, c) in ex.prefix.iter().zip(&trace.steps).rev() {
            let mut dh_prev = vec![0.0; hd];
            for i in 0..hd {
                let dn = dh[i] * (1.0 - c.z[i]);
                let dz = dh[i] * (c.h_prev[i] - c.n[i]);
                dh_prev[i] = dh[i] * c.z[i];
                dan[i] = dn * (1.0 - c.n[i] * c.n[i]);
                let dr = dan[i] * c.hn[i];
                dhn[i] = dan[i] * c.r[i];
                daz[i] = dz * c.z[i] * (1.0 - c.z[i]);
                dar[i] = dr * c.r[i] * (1.0 - c.r[i]);
            }
            let mut dx = vec![0.0; l.din];
            for (g, da) in [(0, &daz), (1, &dar), (2, &dan)] {
                for i in 0..hd {
                    let row = l.w_x + (g * hd + i) * l.din;
                    axpy(da[i], &c.x, &mut grad[row..row + l.din]);
                    axpy(da[i], &p[row..row + l.din], &mut dx);
                    grad[l.b + g * hd + i] += da[i];
                }
            }
            for (g, da) in [(0, &daz), (1, &dar), (2, &dhn)] {
                for i in 0..hd {
                    let row = l.w_h + (g * hd + i) * hd;
                    axpy(da[i], &c.h_prev, &mut grad[row..row + hd]);
                    axpy(da[i], &p[row..row + hd], &mut dh_prev);
                }
            }
            let e = l.loc_emb + v.location * l.dl;
            axpy(1.0, &dx[..l.dl], &mut grad[e..e + l.dl]);
            dh = dh_prev;
        }

        // Initial state h0 = tanh(P e_u + b).
        let ue = l.user_emb + ex.user * l.du;
        for i in 0..hd {
            let da = dh[i] * (1.0 - trace.h0[i] * trace.h0[i]);
            if da == 0.0 {
                continue;
            }
            grad[l.proj_b + i] += da;
            let row = l.proj + i * l.du;
            let (head, tail) = grad.split_at_mut(row);
            axpy(da, &p[ue..ue + l.du], &mut tail[..l.du]);
            axpy(da, &p[row..row + l.du], &mut head[ue..ue + l.du]);
        }
        loss
    }

    /// Gradient of the mean loss over `batch`, and that mean loss.
    pub fn gradient(&self, batch: &[Example]) -> Result<(Gradient, f64)> {
        if batch.is_empty() {
            return Err(Error::Precondition("gradient of an empty batch".into()));
        }
        let mut g = Gradient::zeros(self.layout.total);
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for ex in batch {
            self.check_example(ex)?;
            loss += self.accumulate_example(ex, scale, &mut g.0);
        }
        Ok((g, loss * scale))
    }

    /// One gradient per example (unscaled), with each example's loss.
    pub fn per_example_gradients(&self, batch: &[Example]) -> Result<Vec<(Gradient, f64)>> {
        if batch.is_empty() {
            return Err(Error::Precondition("gradient of an empty batch".into()));
        }
        batch
            .iter()
            .map(|ex| {
                self.check_example(ex)?;
                let mut g = Gradient::zeros(self.layout.total);
                let loss = self.accumulate_example(ex, 1.0, &mut g.0);
                Ok((g, loss))
            })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json_atomic(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        Self::from_checkpoint(ck)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            n_users: self.layout.n_users,
            n_locations: self.layout.n_locations,
            epoch: self.epoch,
            rng_seed: hex::encode(self.rng.get_seed()),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            groups: self
                .layout
                .groups()
                .into_iter()
                .map(|(name, r)| (name.to_string(), r.len()))
                .collect(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format {:?}", ck.format)));
        }
        let mut model = Self::new(ck.config, ck.n_users, ck.n_locations)?;
        if ck.params.len() != model.layout.total {
            return Err(Error::Config(format!(
                "checkpoint holds {} parameters, layout expects {}",
                ck.params.len(),
                model.layout.total
            )));
        }
        let bad = |what: &str| Error::Config(format!("checkpoint has malformed {what}"));
        let seed: [u8; 32] = hex::decode(&ck.rng_seed)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| bad("rng seed"))?;
        let word_pos: u128 = ck.rng_word_pos.parse().map_err(|_| bad("rng position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(ck.rng_stream);
        rng.set_word_pos(word_pos);
        model.params = ck.params;
        model.rng = rng;
        model.epoch = ck.epoch;
        Ok(model)
    }
}

/// Serialized model state. Parameters are stored as 64-bit floats and
/// round-trip exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub n_users: usize,
    pub n_locations: usize,
    pub epoch: usize,
    pub rng_seed: String,
    pub rng_stream: u64,
    pub rng_word_pos: String,
    pub groups: Vec<(String, usize)>,
    pub params: Vec<f64>,
}

impl PoiOracle for PoiModel {
    fn n_users(&self) -> usize {
        self.layout.n_users
    }

    fn n_locations(&self) -> usize {
        self.layout.n_locations
    }

    fn query(&self, user: usize, prefix: &[Visit]) -> Result<Vec<f64>> {
        self.logits(user, prefix)
    }

    fn query_prefixes(&self, user: usize, prefix: &[Visit]) -> Result<Vec<Vec<f64>>> {
        self.prefix_logits(user, prefix)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// `-ln max(softmax(logits)[target], PROB_FLOOR)`.
pub fn neg_log_prob(logits: &[f64], target: usize) -> f64 {
    -softmax(logits)[target].max(PROB_FLOOR).ln()
}

/// Indices of the `k` largest values, ties broken by lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let cmp = |a: &usize, b: &usize| values[*b].total_cmp(&values[*a]).then(a.cmp(b));
    let k = k.min(values.len());
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Zero-based rank of `target` under descending order with lower-index tie-breaks.
pub fn rank_of(values: &[f64], target: usize) -> usize {
    let t = values[target];
    values
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > t || (v == t && j < target))
        .count()
}
