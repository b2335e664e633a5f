//! Encoder-decoder LSTM with additive attention.
//!
//! The encoder embeds each measured `(x_k, u_k)` pair through two fully
//! connected layers (GELU between them) and runs a stacked LSTM over the
//! sequence. The decoder starts from the encoder's final per-layer `(h, c)`,
//! and at every step embeds the previous state together with the current
//! control, attends over the encoder outputs using its previous top-layer
//! hidden state as the query, feeds `[z, context]` through its own stacked
//! LSTM and maps the top output to a state estimate and a slack vector. The
//! first step consumes the last measured state; every later step consumes
//! the previous estimate unchanged.
//!
//! All entry points are batched: a batch of `B` windows is `B` rows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, Checkpoint, ParamId, ParamStore, Tape, Tensor, Var};
use crate::data::{SequenceWindow, WindowBatch};
use crate::dynamics::{SystemState, CONTROL_DIM, STATE_DIM};
use crate::error::{Error, Result};

const INPUT_DIM: usize = STATE_DIM + CONTROL_DIM;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub num_lstm_layers: usize,
    pub attention_dim: usize,
    /// Width of the fully connected layer shared by the state and slack heads.
    pub head_dim: usize,
    /// History length `M`.
    pub history: usize,
    /// Training horizon `N`.
    pub horizon: usize,
    /// Predict `x̂_k = x̂_{k-1} + scale ⊙ head` instead of an absolute state.
    pub residual: bool,
    /// Emit slack variables. Off for the ablations without slack.
    pub slack_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            latent_dim: 32,
            hidden_dim: 64,
            num_lstm_layers: 2,
            attention_dim: 32,
            head_dim: 64,
            history: 50,
            horizon: 25,
            residual: true,
            slack_head: true,
        }
    }

    /// Sized to 238,906 parameters with the slack head.
    pub fn paper() -> Self {
        ModelConfig {
            latent_dim: 88,
            hidden_dim: 72,
            num_lstm_layers: 2,
            attention_dim: 88,
            head_dim: 104,
            ..ModelConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("latent_dim", self.latent_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_lstm_layers", self.num_lstm_layers),
            ("attention_dim", self.attention_dim),
            ("head_dim", self.head_dim),
            ("history", self.history),
            ("horizon", self.horizon),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Closed-form parameter count (must equal `Model::param_count`).
    pub fn param_count(&self) -> usize {
        let (l, h, a, f) = (
            self.latent_dim,
            self.hidden_dim,
            self.attention_dim,
            self.head_dim,
        );
        let embed = INPUT_DIM * l + l + l * l + l;
        let deep = (self.num_lstm_layers - 1) * (2 * h * 4 * h + 4 * h);
        let enc = (l + h) * 4 * h + 4 * h + deep;
        let dec = (l + 2 * h) * 4 * h + 4 * h + deep;
        let att = 2 * h * a + a;
        let heads = h * f + f + (STATE_DIM * f + STATE_DIM) * if self.slack_head { 2 } else { 1 };
        2 * embed + enc + dec + att + heads
    }
}

/// Fixed affine maps between physical units and network units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    /// Per-channel scale of the state head (one-step change for residual
    /// models, state spread otherwise).
    pub output_scale: Vec<f64>,
    /// Offset of the state head for non-residual models.
    pub output_offset: Vec<f64>,
}

impl Default for Normalizer {
    fn default() -> Self {
        Normalizer {
            input_mean: vec![0.0; INPUT_DIM],
            input_std: vec![1.0; INPUT_DIM],
            output_scale: vec![1.0; STATE_DIM],
            output_offset: vec![0.0; STATE_DIM],
        }
    }
}

impl Normalizer {
    /// Channel statistics of the history rows of `windows`.
    pub fn fit(windows: &[SequenceWindow], residual: bool) -> Self {
        let mut sum = vec![0.0; INPUT_DIM];
        let mut sq = vec![0.0; INPUT_DIM];
        let mut dsum = [0.0; STATE_DIM];
        let mut dsq = [0.0; STATE_DIM];
        let mut n = 0.0;
        let mut nd = 0.0;
        for w in windows {
            for (k, (x, u)) in w.history.iter().enumerate() {
                let row: Vec<f64> = x.to_vector().into_iter().chain(u.to_vector()).collect();
                for (i, v) in row.iter().enumerate() {
                    sum[i] += v;
                    sq[i] += v * v;
                }
                n += 1.0;
                if k > 0 {
                    let prev = w.history[k - 1].0.to_vector();
                    for (i, v) in x.to_vector().iter().enumerate() {
                        let d = v - prev[i];
                        dsum[i] += d;
                        dsq[i] += d * d;
                    }
                    nd += 1.0;
                }
            }
        }
        if n == 0.0 {
            return Normalizer::default();
        }
        let stats = |s: &[f64], q: &[f64], n: f64, floor: f64| -> (Vec<f64>, Vec<f64>) {
            let mean: Vec<f64> = s.iter().map(|v| v / n).collect();
            let std = q
                .iter()
                .zip(&mean)
                .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(floor))
                .collect();
            (mean, std)
        };
        let (input_mean, input_std) = stats(&sum, &sq, n, 1e-2);
        if residual && nd > 0.0 {
            // Root-mean-square one-step change, not its spread.
            let output_scale = dsq.iter().map(|q| (q / nd).sqrt().max(1e-4)).collect();
            Normalizer {
                input_mean,
                input_std,
                output_scale,
                output_offset: vec![0.0; STATE_DIM],
            }
        } else {
            Normalizer {
                output_scale: input_std[..STATE_DIM].to_vec(),
                output_offset: input_mean[..STATE_DIM].to_vec(),
                input_mean,
                input_std,
            }
        }
    }

    fn normalize_row(&self, row: &[f64], offset: usize) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(i, v)| (v - self.input_mean[offset + i]) / self.input_std[offset + i])
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct LstmLayer {
    w_input: ParamId,
    w_hidden: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    enc_embed: [Linear; 2],
    enc_lstm: Vec<LstmLayer>,
    dec_embed: [Linear; 2],
    att_query: ParamId,
    att_key: ParamId,
    att_score: ParamId,
    dec_lstm: Vec<LstmLayer>,
    head_trunk: Linear,
    head_state: Linear,
    head_slack: Option<Linear>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub normalizer: Normalizer,
    layout: Layout,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::matrix(rows, cols, data).expect("init shape")
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, inputs: usize, outputs: usize) -> Result<Linear> {
        let bound = 1.0 / (inputs as f64).sqrt();
        let w = uniform(self.rng, inputs, outputs, bound);
        let b = uniform(self.rng, 1, outputs, bound);
        Ok(Linear {
            w: self.store.insert(format!("{name}.w"), w)?,
            b: self.store.insert(format!("{name}.b"), b)?,
        })
    }

    fn lstm(&mut self, name: &str, inputs: usize, hidden: usize) -> Result<LstmLayer> {
        let bound = 1.0 / ((inputs + hidden) as f64).sqrt();
        let w_input = uniform(self.rng, inputs, 4 * hidden, bound);
        let w_hidden = uniform(self.rng, hidden, 4 * hidden, bound);
        let mut bias = uniform(self.rng, 1, 4 * hidden, bound);
        // Gate order i, f, g, o; forget gate starts open.
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        Ok(LstmLayer {
            w_input: self.store.insert(format!("{name}.w_input"), w_input)?,
            w_hidden: self.store.insert(format!("{name}.w_hidden"), w_hidden)?,
            bias: self.store.insert(format!("{name}.bias"), bias)?,
        })
    }

    fn raw(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) -> Result<ParamId> {
        let t = uniform(self.rng, rows, cols, 1.0 / (fan_in as f64).sqrt());
        self.store.insert(name, t)
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let (l, h, a, f) = (
            config.latent_dim,
            config.hidden_dim,
            config.attention_dim,
            config.head_dim,
        );
        let enc_embed = [
            b.linear("encoder.embed.0", INPUT_DIM, l)?,
            b.linear("encoder.embed.1", l, l)?,
        ];
        let enc_lstm = (0..config.num_lstm_layers)
            .map(|i| b.lstm(&format!("encoder.lstm.{i}"), if i == 0 { l } else { h }, h))
            .collect::<Result<_>>()?;
        let dec_embed = [
            b.linear("decoder.embed.0", INPUT_DIM, l)?,
            b.linear("decoder.embed.1", l, l)?,
        ];
        let att_query = b.raw("attention.query", h, a, h)?;
        let att_key = b.raw("attention.key", h, a, h)?;
        let att_score = b.raw("attention.score", a, 1, a)?;
        let dec_lstm = (0..config.num_lstm_layers)
            .map(|i| b.lstm(&format!("decoder.lstm.{i}"), if i == 0 { l + h } else { h }, h))
            .collect::<Result<_>>()?;
        let head_trunk = b.linear("head.trunk", h, f)?;
        let head_state = b.linear("head.state", f, STATE_DIM)?;
        let head_slack = if config.slack_head {
            Some(b.linear("head.slack", f, STATE_DIM)?)
        } else {
            None
        };
        let params = b.store;
        let model = Model {
            config,
            params,
            normalizer: Normalizer::default(),
            layout: Layout {
                enc_embed,
                enc_lstm,
                dec_embed,
                att_query,
                att_key,
                att_score,
                dec_lstm,
                head_trunk,
                head_state,
                head_slack,
            },
        };
        debug_assert_eq!(model.param_count(), model.config.param_count());
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn with_normalizer(mut self, normalizer: Normalizer) -> Self {
        self.normalizer = normalizer;
        self
    }

    /// Place every parameter on `tape`.
    pub fn bind<'m, 't>(&'m self, tape: &'t Tape) -> Result<Bound<'m, 't>> {
        let params: Vec<Var<'t>> = (0..self.params.len())
            .map(|i| tape.param(&self.params, ParamId(i)))
            .collect::<Result<_>>()?;
        let nm = &self.normalizer;
        let inv_std: Vec<f64> = nm.input_std[..STATE_DIM].iter().map(|s| 1.0 / s).collect();
        let mut diag = Tensor::zeros(STATE_DIM, STATE_DIM);
        for (i, v) in inv_std.iter().enumerate() {
            diag.data_mut()[i * STATE_DIM + i] = *v;
        }
        let shift: Vec<f64> = (0..STATE_DIM).map(|i| -nm.input_mean[i] * inv_std[i]).collect();
        Ok(Bound {
            model: self,
            tape,
            params,
            state_scale: tape.constant(diag)?,
            state_shift: tape.constant(Tensor::row(&shift))?,
            out_scale: tape.constant(Tensor::row(&nm.output_scale))?,
            out_offset: tape.constant(Tensor::row(&nm.output_offset))?,
        })
    }

    /// Predict `horizon` states for each window (slacks discarded).
    pub fn predict(&self, windows: &[&SequenceWindow], horizon: usize) -> Result<Vec<PredictionOutput>> {
        let batch = WindowBatch::new(windows, horizon)?;
        let tape = Tape::new();
        let bound = self.bind(&tape)?;
        let graph = bound.predict(&batch, horizon)?;
        Ok(graph.to_outputs())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        #[derive(Serialize)]
        struct Meta<'a> {
            model: &'a ModelConfig,
            normalizer: &'a Normalizer,
        }
        let meta = serde_json::to_string(&Meta {
            model: &self.config,
            normalizer: &self.normalizer,
        })?;
        Ok(Checkpoint::from_store(&self.params, meta))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            model: ModelConfig,
            normalizer: Normalizer,
        }
        let meta: Meta = serde_json::from_str(&ck.metadata)?;
        let mut model = Model::new(meta.model, 0)?;
        ck.restore_into(&mut model.params)?;
        model.normalizer = meta.normalizer;
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Model::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Per-layer LSTM state.
#[derive(Clone)]
pub struct Hidden<'t> {
    pub h: Vec<Var<'t>>,
    pub c: Vec<Var<'t>>,
}

impl<'t> Hidden<'t> {
    pub fn top(&self) -> Var<'t> {
        *self.h.last().expect("at least one layer")
    }
}

pub struct Encoded<'t> {
    /// Top-layer outputs, one `B x H` per history step.
    pub outputs: Vec<Var<'t>>,
    /// Outputs rearranged to `(B·M) x H`, row `b·M + i` = step `i` of window `b`.
    flat: Var<'t>,
    keys: Var<'t>,
    pub final_hidden: Hidden<'t>,
}

impl Encoded<'_> {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

pub struct DecodeOutput<'t> {
    pub state: Var<'t>,
    pub slack: Option<Var<'t>>,
    pub hidden: Hidden<'t>,
    pub attention: Var<'t>,
}

/// Recursive predictions for a batch, still on the tape.
pub struct PredictionGraph<'t> {
    pub states: Vec<Var<'t>>,
    pub slacks: Option<Vec<Var<'t>>>,
}

/// Plain-value predictions for one window. Quaternions are raw network
/// outputs, not normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutput {
    pub states: Vec<SystemState>,
    pub slacks: Vec<[f64; STATE_DIM]>,
}

impl PredictionGraph<'_> {
    pub fn horizon(&self) -> usize {
        self.states.len()
    }

    pub fn to_outputs(&self) -> Vec<PredictionOutput> {
        let states: Vec<Tensor> = self.states.iter().map(|v| v.value()).collect();
        let slacks: Option<Vec<Tensor>> = self
            .slacks
            .as_ref()
            .map(|s| s.iter().map(|v| v.value()).collect());
        let b = states.first().map_or(0, |t| t.rows());
        (0..b)
            .map(|i| PredictionOutput {
                states: states.iter().map(|t| SystemState::from_slice(t.row_slice(i))).collect(),
                slacks: match &slacks {
                    Some(s) => s
                        .iter()
                        .map(|t| t.row_slice(i).try_into().expect("13 columns"))
                        .collect(),
                    None => vec![[0.0; STATE_DIM]; states.len()],
                },
            })
            .collect()
    }
}

/// A model whose parameters have been placed on a tape.
pub struct Bound<'m, 't> {
    model: &'m Model,
    tape: &'t Tape,
    params: Vec<Var<'t>>,
    state_scale: Var<'t>,
    state_shift: Var<'t>,
    out_scale: Var<'t>,
    out_offset: Var<'t>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Embedder {
    Encoder,
    Decoder,
}

impl<'m, 't> Bound<'m, 't> {
    fn p(&self, id: ParamId) -> Var<'t> {
        self.params[id.0]
    }

    fn linear(&self, x: Var<'t>, l: Linear) -> Result<Var<'t>> {
        x.matmul(self.p(l.w))?.add_row(self.p(l.b))
    }

    /// Latent code of normalized `(x, u)` rows.
    pub fn embed_normalized(&self, which: Embedder, input: Var<'t>) -> Result<Var<'t>> {
        let layers = match which {
            Embedder::Encoder => self.model.layout.enc_embed,
            Embedder::Decoder => self.model.layout.dec_embed,
        };
        let hidden = self.linear(input, layers[0])?.gelu()?;
        self.linear(hidden, layers[1])
    }

    /// Latent code of physical-unit states (`B x 13`) and controls (`B x 4`).
    pub fn embed(&self, which: Embedder, states: Var<'t>, controls: &Tensor) -> Result<Var<'t>> {
        let xs = states.matmul(self.state_scale)?.add_row(self.state_shift)?;
        let us = self.normalized_controls(controls)?;
        self.embed_normalized(which, concat(&[xs, us], 1)?)
    }

    fn normalized_controls(&self, controls: &Tensor) -> Result<Var<'t>> {
        let nm = &self.model.normalizer;
        let (b, c) = controls.dims();
        if c != CONTROL_DIM {
            return Err(Error::shape("controls", &[b, c], &[b, CONTROL_DIM]));
        }
        let rows: Vec<Vec<f64>> = (0..b)
            .map(|i| nm.normalize_row(controls.row_slice(i), STATE_DIM))
            .collect();
        self.tape.constant(Tensor::from_rows(&rows)?)
    }

    fn lstm_cell(
        &self,
        layer: LstmLayer,
        input_proj: Var<'t>,
        h: Var<'t>,
        c: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let hd = self.model.config.hidden_dim;
        let gates = input_proj.add(h.matmul(self.p(layer.w_hidden))?)?;
        let i = gates.cols(0..hd)?.sigmoid()?;
        let f = gates.cols(hd..2 * hd)?.sigmoid()?;
        let g = gates.cols(2 * hd..3 * hd)?.tanh()?;
        let o = gates.cols(3 * hd..4 * hd)?.sigmoid()?;
        let c_next = f.mul(c)?.add(i.mul(g)?)?;
        let h_next = o.mul(c_next.tanh()?)?;
        Ok((h_next, c_next))
    }

    fn zeros(&self, rows: usize, cols: usize) -> Result<Var<'t>> {
        self.tape.constant(Tensor::zeros(rows, cols))
    }

    /// Run the encoder over `M` steps of `B x 13` states and `B x 4` controls.
    pub fn encode(&self, states: &[Tensor], controls: &[Tensor]) -> Result<Encoded<'t>> {
        let cfg = &self.model.config;
        let m = states.len();
        if m == 0 || controls.len() != m {
            return Err(Error::shape("encode", &[m], &[controls.len()]));
        }
        let b = states[0].rows();
        // Embed every step at once: row k·B + j is step k of window j.
        let nm = &self.model.normalizer;
        let mut rows = Vec::with_capacity(m * b * INPUT_DIM);
        for (xs, us) in states.iter().zip(controls) {
            if xs.dims() != (b, STATE_DIM) || us.dims() != (b, CONTROL_DIM) {
                return Err(Error::shape(
                    "encode",
                    &[xs.rows(), xs.cols()],
                    &[us.rows(), us.cols()],
                ));
            }
            for j in 0..b {
                rows.extend(nm.normalize_row(xs.row_slice(j), 0));
                rows.extend(nm.normalize_row(us.row_slice(j), STATE_DIM));
            }
        }
        let input = self.tape.constant(Tensor::matrix(m * b, INPUT_DIM, rows)?)?;
        let mut seq = self.embed_normalized(Embedder::Encoder, input)?;

        let hd = cfg.hidden_dim;
        let mut final_h = Vec::with_capacity(cfg.num_lstm_layers);
        let mut final_c = Vec::with_capacity(cfg.num_lstm_layers);
        let mut outputs = Vec::new();
        for (li, &layer) in self.model.layout.enc_lstm.iter().enumerate() {
            let proj = seq.matmul(self.p(layer.w_input))?.add_row(self.p(layer.bias))?;
            let mut h = self.zeros(b, hd)?;
            let mut c = self.zeros(b, hd)?;
            outputs.clear();
            for k in 0..m {
                let step_proj = proj.slice(0, k * b..(k + 1) * b)?;
                (h, c) = self.lstm_cell(layer, step_proj, h, c)?;
                outputs.push(h);
            }
            final_h.push(h);
            final_c.push(c);
            if li + 1 < cfg.num_lstm_layers {
                seq = concat(&outputs, 0)?;
            }
        }
        let flat = concat(&outputs, 1)?.reshape(b * m, hd)?;
        let keys = flat.matmul(self.p(self.model.layout.att_key))?;
        Ok(Encoded {
            outputs,
            flat,
            keys,
            final_hidden: Hidden {
                h: final_h,
                c: final_c,
            },
        })
    }

    /// Additive attention. Returns the context (`B x H`) and the weights
    /// (`B x M`).
    pub fn attend(&self, query: Var<'t>, enc: &Encoded<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let m = enc.len();
        let (b, hd) = query.dims();
        let lay = &self.model.layout;
        let q = query.matmul(self.p(lay.att_query))?.repeat_rows(m)?;
        let scores = q
            .add(enc.keys)?
            .tanh()?
            .matmul(self.p(lay.att_score))?
            .reshape(b, m)?;
        let weights = scores.softmax(1)?;
        let ones = self.tape.constant(Tensor::filled(1, hd, 1.0))?;
        let spread = weights.reshape(b * m, 1)?.matmul(ones)?;
        let context = spread.mul(enc.flat)?.sum_row_groups(m)?;
        Ok((context, weights))
    }

    /// One decoder step from `prev_state` (`B x 13`, physical units) and
    /// `control` (`B x 4`).
    pub fn decode_step(
        &self,
        prev_state: Var<'t>,
        control: &Tensor,
        hidden: &Hidden<'t>,
        enc: &Encoded<'t>,
    ) -> Result<DecodeOutput<'t>> {
        let lay = &self.model.layout;
        let z = self.embed(Embedder::Decoder, prev_state, control)?;
        let (context, attention) = self.attend(hidden.top(), enc)?;
        let mut input = concat(&[z, context], 1)?;
        let mut h_out = Vec::with_capacity(hidden.h.len());
        let mut c_out = Vec::with_capacity(hidden.c.len());
        for (li, &layer) in lay.dec_lstm.iter().enumerate() {
            let proj = input.matmul(self.p(layer.w_input))?.add_row(self.p(layer.bias))?;
            let (h, c) = self.lstm_cell(layer, proj, hidden.h[li], hidden.c[li])?;
            h_out.push(h);
            c_out.push(c);
            input = h;
        }
        let trunk = self.linear(input, lay.head_trunk)?.gelu()?;
        let raw = self.linear(trunk, lay.head_state)?;
        let (b, _) = raw.dims();
        let ones = self.tape.constant(Tensor::filled(b, 1, 1.0))?;
        let scale = ones.matmul(self.out_scale)?;
        let delta = raw.mul(scale)?;
        let state = if self.model.config.residual {
            prev_state.add(delta)?
        } else {
            delta.add_row(self.out_offset)?
        };
        let slack = match lay.head_slack {
            Some(l) => Some(self.linear(trunk, l)?.mul(scale)?),
            None => None,
        };
        Ok(DecodeOutput {
            state,
            slack,
            hidden: Hidden { h: h_out, c: c_out },
            attention,
        })
    }

    /// Recursive multi-step prediction for a batch.
    pub fn predict(&self, batch: &WindowBatch, horizon: usize) -> Result<PredictionGraph<'t>> {
        if horizon == 0 || batch.horizon() < horizon && batch.decoder_control_tensors.len() < horizon {
            return Err(Error::shape("predict", &[horizon], &[batch.horizon()]));
        }
        if batch.history_len() != self.model.config.history {
            return Err(Error::shape(
                "predict (history)",
                &[batch.history_len()],
                &[self.model.config.history],
            ));
        }
        let enc = self.encode(&batch.history_states, &batch.history_controls)?;
        let mut hidden = enc.final_hidden.clone();
        let mut prev = self.tape.constant(batch.last_state.clone())?;
        let mut states = Vec::with_capacity(horizon);
        let mut slacks = Vec::with_capacity(horizon);
        for control in batch.decoder_control_tensors.iter().take(horizon) {
            let out = self.decode_step(prev, control, &hidden, &enc)?;
            states.push(out.state);
            if let Some(s) = out.slack {
                slacks.push(s);
            }
            hidden = out.hidden;
            prev = out.state;
        }
        Ok(PredictionGraph {
            states,
            slacks: self.model.config.slack_head.then_some(slacks),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::WindowSource;
    use crate::dynamics::{ControlInput, PhysicalParams};
    use crate::so3::Vec3;
    use rand::Rng;

    fn tiny(history: usize) -> ModelConfig {
        ModelConfig {
            latent_dim: 6,
            hidden_dim: 5,
            num_lstm_layers: 2,
            attention_dim: 4,
            head_dim: 7,
            history,
            horizon: 3,
            ..ModelConfig::desk()
        }
    }

    fn window(seed: u64, history: usize, horizon: usize) -> SequenceWindow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = PhysicalParams::default();
        let state = |rng: &mut ChaCha8Rng| {
            let mut s = SystemState::hover(Vec3::new(0.0, 0.0, -1.0), &params);
            s.p += Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0);
            s.v = Vec3::new(rng.random_range(-1.0..1.0), 0.0, rng.random_range(-1.0..1.0));
            s.p_load = s.p + Vec3::new(0.0, 0.0, 0.6);
            s
        };
        let control = |rng: &mut ChaCha8Rng| {
            ControlInput::new(rng.random_range(12.0..17.0), Vec3::new(rng.random_range(-1.0..1.0), 0.0, 0.0))
        };
        SequenceWindow {
            history: (0..history).map(|_| (state(&mut rng), control(&mut rng))).collect(),
            future_controls: (0..horizon).map(|_| control(&mut rng)).collect(),
            future_truth: (0..horizon).map(|_| state(&mut rng)).collect(),
            omega_load: Vec3::ZERO,
            source: WindowSource {
                log_id: "t".into(),
                start: 0,
            },
        }
    }

    #[test]
    fn parameter_counts() {
        for cfg in [ModelConfig::desk(), ModelConfig::paper(), tiny(3)] {
            let m = Model::new(cfg.clone(), 1).unwrap();
            assert_eq!(m.param_count(), cfg.param_count());
        }
        assert_eq!(ModelConfig::paper().param_count(), 238_906);
        let no_slack = ModelConfig {
            slack_head: false,
            ..ModelConfig::desk()
        };
        assert_eq!(
            ModelConfig::desk().param_count() - no_slack.param_count(),
            13 * 64 + 13
        );
    }

    #[test]
    fn zero_embedder_gives_zero_latent() {
        let mut m = Model::new(tiny(2), 3).unwrap();
        for (id, name, _) in m.params.clone().iter() {
            if name.starts_with("encoder.embed") {
                m.params.get_mut(id).data_mut().fill(0.0);
            }
        }
        let tape = Tape::new();
        let b = m.bind(&tape).unwrap();
        let x = tape.constant(Tensor::filled(2, STATE_DIM, 0.7)).unwrap();
        let z = b
            .embed(Embedder::Encoder, x, &Tensor::filled(2, CONTROL_DIM, 3.0))
            .unwrap();
        assert_eq!(z.dims(), (2, 6));
        assert!(z.value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn attention_is_a_convex_combination() {
        let m = Model::new(tiny(5), 4).unwrap();
        let w = window(1, 5, 3);
        let batch = WindowBatch::new(&[&w, &window(2, 5, 3)], 3).unwrap();
        let tape = Tape::new();
        let b = m.bind(&tape).unwrap();
        let enc = b.encode(&batch.history_states, &batch.history_controls).unwrap();
        let (ctx, weights) = b.attend(enc.final_hidden.top(), &enc).unwrap();
        assert_eq!(weights.dims(), (2, 5));
        assert_eq!(ctx.dims(), (2, 5));
        let wv = weights.value();
        for r in 0..2 {
            let row = wv.row_slice(r);
            assert!(row.iter().all(|v| *v > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for h in 0..5 {
                let expected: f64 = (0..5)
                    .map(|i| row[i] * enc.outputs[i].value().get(r, h))
                    .sum();
                assert!((ctx.value().get(r, h) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_step_history() {
        let m = Model::new(tiny(1), 5).unwrap();
        let w = window(3, 1, 2);
        let batch = WindowBatch::new(&[&w], 2).unwrap();
        let tape = Tape::new();
        let b = m.bind(&tape).unwrap();
        let enc = b.encode(&batch.history_states, &batch.history_controls).unwrap();
        assert_eq!(enc.len(), 1);
        let (ctx, weights) = b.attend(enc.final_hidden.top(), &enc).unwrap();
        assert_eq!(weights.value().data(), &[1.0]);
        assert_eq!(ctx.value(), enc.outputs[0].value());
    }

    #[test]
    fn zero_slack_head_emits_zero_slack() {
        let mut m = Model::new(tiny(3), 6).unwrap();
        for name in ["head.slack.w", "head.slack.b"] {
            let id = m.params.id(name).unwrap();
            m.params.get_mut(id).data_mut().fill(0.0);
        }
        let out = m.predict(&[&window(4, 3, 3)], 3).unwrap();
        assert!(out[0].slacks.iter().flatten().all(|v| *v == 0.0));
        assert_eq!(out[0].states.len(), 3);
    }

    #[test]
    fn prediction_is_pure_and_seeded() {
        let w = window(5, 3, 3);
        let a = Model::new(tiny(3), 7).unwrap().predict(&[&w], 3).unwrap();
        let b = Model::new(tiny(3), 7).unwrap().predict(&[&w], 3).unwrap();
        assert_eq!(a, b);
        let c = Model::new(tiny(3), 8).unwrap().predict(&[&w], 3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn batch_rows_match_single_windows() {
        let m = Model::new(tiny(4), 9).unwrap();
        let (w1, w2) = (window(6, 4, 3), window(7, 4, 3));
        let both = m.predict(&[&w1, &w2], 3).unwrap();
        let one = m.predict(&[&w2], 3).unwrap();
        for (a, b) in both[1].states.iter().zip(&one[0].states) {
            for (x, y) in a.to_vector().iter().zip(b.to_vector()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sensitive_to_controls_and_history_order() {
        let m = Model::new(tiny(4), 10).unwrap();
        let w = window(8, 4, 3);
        let base = m.predict(&[&w], 3).unwrap();
        let mut other = w.clone();
        other.future_controls[0].thrust += 1.0;
        assert_ne!(m.predict(&[&other], 3).unwrap()[0].states[2], base[0].states[2]);
        let mut swapped = w.clone();
        swapped.history.swap(0, 2);
        assert_ne!(m.predict(&[&swapped], 3).unwrap()[0].states[0], base[0].states[0]);
    }

    #[test]
    fn decoder_feeds_back_its_own_estimate() {
        let m = Model::new(tiny(3), 11).unwrap();
        let w = window(9, 3, 3);
        let batch = WindowBatch::new(&[&w], 3).unwrap();
        let tape = Tape::new();
        let b = m.bind(&tape).unwrap();
        let graph = b.predict(&batch, 3).unwrap();
        // Re-run the decoder by hand from the first estimate.
        let enc = b.encode(&batch.history_states, &batch.history_controls).unwrap();
        let first = b
            .decode_step(
                tape.constant(batch.last_state.clone()).unwrap(),
                &batch.decoder_control_tensors[0],
                &enc.final_hidden,
                &enc,
            )
            .unwrap();
        assert_eq!(first.state.value(), graph.states[0].value());
        let second = b
            .decode_step(graph.states[0], &batch.decoder_control_tensors[1], &first.hidden, &enc)
            .unwrap();
        assert_eq!(second.state.value(), graph.states[1].value());
    }

    #[test]
    fn horizon_one_and_history_mismatch() {
        let m = Model::new(tiny(3), 12).unwrap();
        assert_eq!(m.predict(&[&window(10, 3, 1)], 1).unwrap()[0].states.len(), 1);
        assert!(m.predict(&[&window(10, 4, 1)], 1).is_err());
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let m = Model::new(tiny(3), 13).unwrap();
        let wins = [window(11, 3, 3), window(12, 3, 3)];
        let batch = WindowBatch::new(&[&wins[0], &wins[1]], 3).unwrap();
        let tape = Tape::new();
        let b = m.bind(&tape).unwrap();
        let g = b.predict(&batch, 3).unwrap();
        let mut root = g.states[0].sum().unwrap();
        for s in g.states.iter().chain(g.slacks.iter().flatten()) {
            root = root.add(s.mul(*s).unwrap().sum().unwrap()).unwrap();
        }
        let grads = tape.backward(root).unwrap();
        for ((_, name, _), gr) in m.params.iter().zip(grads.for_params(&m.params)) {
            assert!(gr.max_abs() > 0.0, "{name} has no gradient");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut norm = Normalizer::default();
        norm.input_mean[0] = 0.25;
        norm.output_scale[3] = 0.5;
        let m = Model::new(tiny(3), 14).unwrap().with_normalizer(norm);
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.normalizer, m.normalizer);
        assert_eq!(back.config, m.config);
        let w = window(13, 3, 3);
        assert_eq!(back.predict(&[&w], 3).unwrap(), m.predict(&[&w], 3).unwrap());
    }
}
