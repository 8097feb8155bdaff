//! The neural-process recommender.
//!
//! Every example `x_m = (user, source history, target item)` is embedded by
//! attention over the source history; the resulting `d²` vector is reshaped
//! into a `d×d` user-specific projection of the user embedding and
//! concatenated with the target item embedding. A set encoder maps
//! `(x_m, y_m)` pairs to a diagonal Gaussian over the task latent `z`, a
//! second set encoder summarises the support set into `h`, and a decoder
//! whose hidden layers are scaled and shifted by `tanh` coefficients of `h`
//! predicts the rating from `[x_m ‖ z]`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::tasks::{Phase, RatingExample, Task};

/// Bounds applied to `log σ` before exponentiation.
pub const LOG_SIGMA_MIN: f64 = -10.0;
pub const LOG_SIGMA_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentMode {
    /// `z = μ`
    Mean,
    /// `z = μ + ε ⊙ σ`
    Sample,
}

/// Component switches for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablations {
    /// Drop the preference remainer: decoder modulation fixed at γ = 1, β = 0.
    #[serde(default)]
    pub prm: bool,
    /// Drop history attention: uniform mean pooling over the history.
    #[serde(default)]
    pub acp: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// User embedding width; item embeddings have `d²` entries.
    pub d: usize,
    pub hidden: usize,
    pub decoder_depth: usize,
    pub ablations: Ablations,
    pub test_latent_mode: LatentMode,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 8,
            hidden: 64,
            decoder_depth: 3,
            ablations: Ablations::default(),
            test_latent_mode: LatentMode::Mean,
            init_std: 0.1,
        }
    }
}

impl ModelConfig {
    /// Width of `x_m`: projected user (`d`) plus target item (`d²`).
    pub fn x_dim(&self) -> usize {
        self.d + self.d * self.d
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.hidden == 0 || self.decoder_depth == 0 {
            return Err(Error::Config("d, hidden and decoder_depth must be positive".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(format!("init_std {} must be positive", self.init_std)));
        }
        Ok(())
    }
}

/// Embedding table sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub users: usize,
    pub src_items: usize,
    pub tgt_items: usize,
}

#[derive(Debug, Clone)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Film {
    w_gamma: ParamId,
    w_beta: ParamId,
}

#[derive(Debug, Clone)]
struct Handles {
    user_emb: ParamId,
    src_item_emb: ParamId,
    tgt_item_emb: ParamId,
    attn_q: ParamId,
    attn_w: ParamId,
    encoder: Vec<Dense>,
    remainer: Vec<Dense>,
    w_r: ParamId,
    w_mu: ParamId,
    w_sigma: ParamId,
    decoder: Vec<Dense>,
    film: Vec<Film>,
    output: Dense,
    aux: Vec<Dense>,
}

const SET_ENCODER_DEPTH: usize = 3;

/// Parameter layout: `(name, shape, is_bias)` in registration order.
fn layout(cfg: &ModelConfig, vocab: &Vocab) -> Vec<(String, Vec<usize>, bool)> {
    let d = cfg.d;
    let d2 = d * d;
    let h = cfg.hidden;
    let mut out = vec![
        ("user_emb".to_string(), vec![vocab.users, d], false),
        ("src_item_emb".to_string(), vec![vocab.src_items, d2], false),
        ("tgt_item_emb".to_string(), vec![vocab.tgt_items, d2], false),
        ("attn.q".to_string(), vec![1, d], false),
        ("attn.w".to_string(), vec![d, d2], false),
    ];
    let mlp = |prefix: &str, dims: &[usize], out: &mut Vec<(String, Vec<usize>, bool)>| {
        for (l, win) in dims.windows(2).enumerate() {
            out.push((format!("{prefix}.{l}.w"), vec![win[1], win[0]], false));
            out.push((format!("{prefix}.{l}.b"), vec![win[1]], true));
        }
    };
    let set_dims = [cfg.x_dim() + 1, h, h, d];
    debug_assert_eq!(set_dims.len(), SET_ENCODER_DEPTH + 1);
    mlp("encoder", &set_dims, &mut out);
    mlp("remainer", &set_dims, &mut out);
    for name in ["head.w_r", "head.w_mu", "head.w_sigma"] {
        out.push((name.to_string(), vec![d, d], false));
    }
    let mut dec_dims = vec![cfg.x_dim() + d];
    dec_dims.extend(std::iter::repeat_n(h, cfg.decoder_depth));
    mlp("decoder", &dec_dims, &mut out);
    for l in 0..cfg.decoder_depth {
        out.push((format!("film.{l}.w_gamma"), vec![h, d], false));
        out.push((format!("film.{l}.w_beta"), vec![h, d], false));
    }
    mlp("output", &[h, 1], &mut out);
    mlp("aux", &[3 * d, h, 1], &mut out);
    out
}

impl Handles {
    fn resolve(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let dense = |prefix: &str| -> Result<Dense> {
            Ok(Dense {
                w: store.id(&format!("{prefix}.w"))?,
                b: store.id(&format!("{prefix}.b"))?,
            })
        };
        let stack = |prefix: &str, n: usize| -> Result<Vec<Dense>> {
            (0..n).map(|l| dense(&format!("{prefix}.{l}"))).collect()
        };
        Ok(Handles {
            user_emb: store.id("user_emb")?,
            src_item_emb: store.id("src_item_emb")?,
            tgt_item_emb: store.id("tgt_item_emb")?,
            attn_q: store.id("attn.q")?,
            attn_w: store.id("attn.w")?,
            encoder: stack("encoder", SET_ENCODER_DEPTH)?,
            remainer: stack("remainer", SET_ENCODER_DEPTH)?,
            w_r: store.id("head.w_r")?,
            w_mu: store.id("head.w_mu")?,
            w_sigma: store.id("head.w_sigma")?,
            decoder: stack("decoder", cfg.decoder_depth)?,
            film: (0..cfg.decoder_depth)
                .map(|l| {
                    Ok(Film {
                        w_gamma: store.id(&format!("film.{l}.w_gamma"))?,
                        w_beta: store.id(&format!("film.{l}.w_beta"))?,
                    })
                })
                .collect::<Result<_>>()?,
            output: dense("output.0")?,
            aux: stack("aux", 2)?,
        })
    }
}

/// Diagonal Gaussian as tape nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentNodes {
    pub mu: Var,
    pub log_sigma: Var,
}

/// Diagonal Gaussian values, `log σ` already clamped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianLatent {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl GaussianLatent {
    pub fn read(tape: &Tape<'_>, nodes: LatentNodes) -> Self {
        GaussianLatent {
            mu: tape.value(nodes.mu).data().to_vec(),
            log_sigma: tape.value(nodes.log_sigma).data().to_vec(),
        }
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|v| v.exp()).collect()
    }

    /// Records the distribution as constant nodes.
    pub fn record(&self, tape: &mut Tape<'_>) -> Result<LatentNodes> {
        if self.mu.len() != self.log_sigma.len() {
            return Err(Error::Shape {
                op: "gaussian",
                left: vec![self.mu.len()],
                right: vec![self.log_sigma.len()],
            });
        }
        Ok(LatentNodes {
            mu: tape.vector(self.mu.clone())?,
            log_sigma: tape.vector(self.log_sigma.clone())?,
        })
    }
}

/// Task-level latent quantities of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskLatents {
    /// `q(z | C)`
    pub prior: LatentNodes,
    /// `q(z | Q)`, training phase only.
    pub posterior: Option<LatentNodes>,
    pub z: Var,
    pub h: Var,
    /// Noise used for `z`; zeros in mean mode.
    pub epsilon: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskForward {
    /// One scalar node per query example.
    pub predictions: Vec<Var>,
    pub latents: TaskLatents,
}

/// Per-layer FiLM coefficients; `None` when the remainer is ablated.
pub type FilmCoefficients = Option<Vec<(Var, Var)>>;

/// Model parameters plus the configuration that shaped them.
#[derive(Debug, Clone)]
pub struct Cdrnp {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    handles: Handles,
}

impl Cdrnp {
    /// Fresh parameters: weights and embeddings `~ N(0, init_std²)`, biases 0.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, vocab: Vocab, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if vocab.users == 0 || vocab.src_items == 0 || vocab.tgt_items == 0 {
            return Err(Error::contract(format!("empty vocabulary {vocab:?}")));
        }
        let mut store = ParamStore::new();
        for (name, shape, is_bias) in layout(&config, &vocab) {
            let numel: usize = shape.iter().product();
            let data = if is_bias {
                vec![0.0; numel]
            } else {
                (0..numel)
                    .map(|_| {
                        let n: f64 = StandardNormal.sample(rng);
                        n * config.init_std
                    })
                    .collect()
            };
            store.add(name, Tensor::new(shape, data)?)?;
        }
        Self::from_store(config, vocab, store)
    }

    /// Wraps an existing store after checking it has exactly the expected
    /// parameters and shapes.
    pub fn from_store(config: ModelConfig, vocab: Vocab, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config, &vocab);
        if expected.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                store.len()
            )));
        }
        for (name, shape, _) in &expected {
            let id = store.id(name)?;
            if store.value(id).shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "parameter layout",
                    left: shape.clone(),
                    right: store.value(id).shape().to_vec(),
                });
            }
        }
        let handles = Handles::resolve(&store, &config)?;
        Ok(Cdrnp {
            config,
            vocab,
            store,
            handles,
        })
    }

    pub fn ablations(&self) -> Ablations {
        self.config.ablations
    }

    /// Names of parameters that receive no gradient under the current ablations.
    pub fn inactive_params(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.config.ablations.prm {
            for (_, p) in self.store.iter() {
                if p.name.starts_with("film.") || p.name.starts_with("remainer.") {
                    out.push(p.name.clone());
                }
            }
        }
        if self.config.ablations.acp {
            out.push("attn.q".into());
        }
        out
    }

    /// Softmax attention over history embeddings:
    /// `a_k = qᵀ relu(W_a v_k)`, weights = softmax(a).
    pub fn attention_weights(&self, tape: &mut Tape<'_>, history: &[Var]) -> Result<Var> {
        if history.is_empty() {
            return Err(Error::contract("attention over an empty history"));
        }
        let mut scores = Vec::with_capacity(history.len());
        for &v in history {
            let proj = tape.linear(self.handles.attn_w, v, None)?;
            let act = tape.relu(proj)?;
            scores.push(tape.linear(self.handles.attn_q, act, None)?);
        }
        let stacked = tape.stack(&scores)?;
        tape.softmax(stacked)
    }

    /// Attention weights over a source history as plain values; uniform
    /// when attention is ablated.
    pub fn history_attention(&self, history: &[usize]) -> Result<Vec<f64>> {
        if self.config.ablations.acp {
            if history.is_empty() {
                return Err(Error::contract("attention over an empty history"));
            }
            return Ok(vec![1.0 / history.len() as f64; history.len()]);
        }
        let mut tape = Tape::new(&self.store);
        let items = history
            .iter()
            .map(|&i| tape.row(self.handles.src_item_emb, i))
            .collect::<Result<Vec<_>>>()?;
        let w = self.attention_weights(&mut tape, &items)?;
        Ok(tape.value(w).data().to_vec())
    }

    /// `Resize(c)·u`: reads `c` (length `d²`) as a row-major `d×d` matrix.
    pub fn project_user(&self, tape: &mut Tape<'_>, c: Var, u: Var) -> Result<Var> {
        tape.matvec(c, u, self.config.d, self.config.d)
    }

    /// `x_m = [Resize(c_u)·u ‖ v_t]` for one example.
    pub fn embed_characteristic(&self, tape: &mut Tape<'_>, example: &RatingExample) -> Result<Var> {
        if example.history.is_empty() {
            return Err(Error::contract(format!("user {} has an empty history", example.user)));
        }
        let items = example
            .history
            .iter()
            .map(|&i| tape.row(self.handles.src_item_emb, i))
            .collect::<Result<Vec<_>>>()?;
        let c = if self.config.ablations.acp {
            tape.mean(&items)?
        } else {
            let w = self.attention_weights(tape, &items)?;
            tape.weighted_sum(w, &items)?
        };
        let u = tape.row(self.handles.user_emb, example.user)?;
        let u_hat = self.project_user(tape, c, u)?;
        let v_t = tape.row(self.handles.tgt_item_emb, example.candidate)?;
        tape.concat(&[u_hat, v_t])
    }

    fn mlp(&self, tape: &mut Tape<'_>, layers: &[Dense], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in layers.iter().enumerate() {
            h = tape.linear(l.w, h, Some(l.b))?;
            if i + 1 < layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    fn pair_input(tape: &mut Tape<'_>, x: Var, y: f64) -> Result<Var> {
        let y = tape.vector(vec![y])?;
        tape.concat(&[x, y])
    }

    /// Mean-aggregated set encoding of `(x_m, y_m)` pairs followed by the
    /// Gaussian heads.
    pub fn encode_latent(&self, tape: &mut Tape<'_>, pairs: &[(Var, f64)]) -> Result<LatentNodes> {
        if pairs.is_empty() {
            return Err(Error::contract("latent encoder needs at least one pair"));
        }
        let mut reps = Vec::with_capacity(pairs.len());
        for &(x, y) in pairs {
            let input = Self::pair_input(tape, x, y)?;
            reps.push(self.mlp(tape, &self.handles.encoder, input)?);
        }
        let r_bar = tape.mean(&reps)?;
        let r_hat = tape.linear(self.handles.w_r, r_bar, None)?;
        let r_hat = tape.relu(r_hat)?;
        let mu = tape.linear(self.handles.w_mu, r_hat, None)?;
        let log_sigma = tape.linear(self.handles.w_sigma, r_hat, None)?;
        let log_sigma = tape.clamp(log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
        Ok(LatentNodes { mu, log_sigma })
    }

    /// Reparameterised draw `z = μ + ε ⊙ exp(log σ)`; `ε` is a constant node.
    pub fn sample_latent<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        g: LatentNodes,
        rng: &mut R,
        mode: LatentMode,
    ) -> Result<(Var, Vec<f64>)> {
        sample_latent(tape, g, rng, mode)
    }

    /// Support-set summary `h = mean_m MLP_φ([x_m ‖ y_m])`.
    pub fn encode_remainer(&self, tape: &mut Tape<'_>, pairs: &[(Var, f64)]) -> Result<Var> {
        if pairs.is_empty() {
            return Err(Error::contract("remainer needs at least one support pair"));
        }
        let mut reps = Vec::with_capacity(pairs.len());
        for &(x, y) in pairs {
            let input = Self::pair_input(tape, x, y)?;
            reps.push(self.mlp(tape, &self.handles.remainer, input)?);
        }
        tape.mean(&reps)
    }

    /// `γ^l = tanh(W_γ^l h)`, `β^l = tanh(W_β^l h)` for every decoder layer.
    pub fn film_coefficients(&self, tape: &mut Tape<'_>, h: Var) -> Result<FilmCoefficients> {
        if self.config.ablations.prm {
            return Ok(None);
        }
        let mut out = Vec::with_capacity(self.handles.film.len());
        for f in &self.handles.film {
            let g = tape.linear(f.w_gamma, h, None)?;
            let g = tape.tanh(g)?;
            let b = tape.linear(f.w_beta, h, None)?;
            let b = tape.tanh(b)?;
            out.push((g, b));
        }
        Ok(Some(out))
    }

    /// Decoder with precomputed modulation coefficients.
    pub fn decode_with(&self, tape: &mut Tape<'_>, x: Var, z: Var, film: &FilmCoefficients) -> Result<Var> {
        let mut g = tape.concat(&[x, z])?;
        for (l, layer) in self.handles.decoder.iter().enumerate() {
            let mut a = tape.linear(layer.w, g, Some(layer.b))?;
            if let Some(coeffs) = film {
                let (gamma, beta) = coeffs[l];
                a = tape.mul(gamma, a)?;
                a = tape.add(a, beta)?;
            }
            g = tape.relu(a)?;
        }
        tape.linear(self.handles.output.w, g, Some(self.handles.output.b))
    }

    /// `ŷ` for one example given `z` and the remainer summary `h`.
    pub fn decode_rating(&self, tape: &mut Tape<'_>, x: Var, z: Var, h: Var) -> Result<Var> {
        let film = self.film_coefficients(tape, h)?;
        self.decode_with(tape, x, z, &film)
    }

    /// Full episode. Training: prior from the support set, posterior from the
    /// query set, `z` sampled from the posterior. Testing: `z` from the
    /// prior only, and query ratings are never read.
    pub fn forward_task<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        task: &Task,
        phase: Phase,
        rng: &mut R,
    ) -> Result<TaskForward> {
        if task.phase != phase {
            return Err(Error::contract(format!(
                "task is {:?} but forward pass requested {:?}",
                task.phase, phase
            )));
        }
        if task.support.is_empty() || task.query.is_empty() {
            return Err(Error::contract("task needs non-empty support and query sets"));
        }
        let support = self.visible_pairs(tape, &task.support)?;
        let prior = self.encode_latent(tape, &support)?;
        let h = self.encode_remainer(tape, &support)?;

        let (posterior, query_x, z, epsilon) = match phase {
            Phase::Training => {
                let pairs = self.visible_pairs(tape, &task.query)?;
                let posterior = self.encode_latent(tape, &pairs)?;
                let (z, eps) = sample_latent(tape, posterior, rng, LatentMode::Sample)?;
                let xs = pairs.into_iter().map(|(x, _)| x).collect::<Vec<_>>();
                (Some(posterior), xs, z, eps)
            }
            Phase::Testing => {
                assert!(
                    task.query.iter().all(|e| e.rating.is_none()),
                    "testing-phase query ratings must be hidden from the model"
                );
                let xs = task
                    .query
                    .iter()
                    .map(|e| self.embed_characteristic(tape, e))
                    .collect::<Result<Vec<_>>>()?;
                let (z, eps) = sample_latent(tape, prior, rng, self.config.test_latent_mode)?;
                (None, xs, z, eps)
            }
        };

        let film = self.film_coefficients(tape, h)?;
        let predictions = query_x
            .iter()
            .map(|&x| self.decode_with(tape, x, z, &film))
            .collect::<Result<Vec<_>>>()?;
        Ok(TaskForward {
            predictions,
            latents: TaskLatents {
                prior,
                posterior,
                z,
                h,
                epsilon,
            },
        })
    }

    fn visible_pairs(&self, tape: &mut Tape<'_>, examples: &[RatingExample]) -> Result<Vec<(Var, f64)>> {
        examples
            .iter()
            .map(|e| {
                let y = e
                    .rating
                    .ok_or_else(|| Error::contract("support/training example without a rating"))?;
                Ok((self.embed_characteristic(tape, e)?, y))
            })
            .collect()
    }

    /// Source-domain rating head on `[u ‖ p ‖ u⊙p]` with `p = W_a v_s`.
    pub fn aux_prediction(&self, tape: &mut Tape<'_>, user: usize, src_item: usize) -> Result<Var> {
        let u = tape.row(self.handles.user_emb, user)?;
        let v = tape.row(self.handles.src_item_emb, src_item)?;
        let p = tape.linear(self.handles.attn_w, v, None)?;
        let up = tape.mul(u, p)?;
        let input = tape.concat(&[u, p, up])?;
        self.mlp(tape, &self.handles.aux, input)
    }

    /// Query predictions as plain values (no gradients kept).
    pub fn predict<R: Rng + ?Sized>(&self, task: &Task, rng: &mut R) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.store);
        let out = self.forward_task(&mut tape, task, task.phase, rng)?;
        Ok(out.predictions.iter().map(|&p| tape.scalar(p)).collect())
    }
}

/// `z = μ + ε ⊙ exp(log σ)` with `ε ~ N(0, I)`, or `z = μ` in mean mode.
pub fn sample_latent<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    g: LatentNodes,
    rng: &mut R,
    mode: LatentMode,
) -> Result<(Var, Vec<f64>)> {
    let dim = tape.value(g.mu).len();
    match mode {
        LatentMode::Mean => Ok((g.mu, vec![0.0; dim])),
        LatentMode::Sample => {
            let eps: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let sigma = tape.exp(g.log_sigma)?;
            let e = tape.vector(eps.clone())?;
            let noise = tape.mul(e, sigma)?;
            Ok((tape.add(g.mu, noise)?, eps))
        }
    }
}
