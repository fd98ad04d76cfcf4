//! Pre-norm causal transformer over embedding tokens, trained with dense
//! next-token regression.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blob::{expect_magic, read_exact, read_record, read_u64, write_record, write_u64};
use crate::error::{shape_err, GepError, Result};
use crate::par::{self, Exec};
use crate::seq::{self, ArWindow, Modality, TokenSequence};
use crate::tensor::{AdamW, Graph, LrSchedule, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const CHECKPOINT_MAGIC: &[u8; 8] = b"GEPCKPT1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub max_window: usize,
    pub seed: u64,
    /// Std of the positional and modality table initialization.
    pub encoding_std: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            dim: 32,
            ff_dim: 128,
            max_window: 64,
            seed: 0,
            encoding_std: 1.0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.dim == 0 || self.ff_dim == 0 || self.max_window == 0 {
            return Err(GepError::Parameter("transformer sizes must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(GepError::Parameter(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(self.encoding_std >= 0.0 && self.encoding_std.is_finite()) {
            return Err(GepError::Parameter("encoding_std must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Named parameters in a fixed order; the first two are the positional and
/// modality tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub cfg: TransformerConfig,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
}

const PER_LAYER: usize = 13;

impl Transformer {
    pub fn new(cfg: TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (d, f) = (cfg.dim, cfg.ff_dim);
        let w = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f64| {
            Tensor::randn(rng, &[rows, cols], gain / (rows as f64).sqrt())
        };
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut add = |name: String, t: Tensor| {
            names.push(name);
            params.push(t);
        };
        add("pos".into(), Tensor::randn(&mut rng, &[cfg.max_window, d], cfg.encoding_std));
        add("modality".into(), Tensor::randn(&mut rng, &[2, d], cfg.encoding_std));
        let out_gain = 1.0 / (2.0 * cfg.layers as f64).sqrt();
        for l in 0..cfg.layers {
            add(format!("l{l}.ln1.g"), Tensor::filled(&[d], 1.0));
            add(format!("l{l}.ln1.b"), Tensor::zeros(&[d]));
            add(format!("l{l}.wq"), w(&mut rng, d, d, 1.0));
            add(format!("l{l}.wk"), w(&mut rng, d, d, 1.0));
            add(format!("l{l}.wv"), w(&mut rng, d, d, 1.0));
            add(format!("l{l}.wo"), w(&mut rng, d, d, out_gain));
            add(format!("l{l}.bo"), Tensor::zeros(&[d]));
            add(format!("l{l}.ln2.g"), Tensor::filled(&[d], 1.0));
            add(format!("l{l}.ln2.b"), Tensor::zeros(&[d]));
            add(format!("l{l}.w1"), w(&mut rng, d, f, 1.0));
            add(format!("l{l}.b1"), Tensor::zeros(&[f]));
            add(format!("l{l}.w2"), w(&mut rng, f, d, out_gain));
            add(format!("l{l}.b2"), Tensor::zeros(&[d]));
        }
        add("lnf.g".into(), Tensor::filled(&[d], 1.0));
        add("lnf.b".into(), Tensor::zeros(&[d]));
        add("head.w".into(), w(&mut rng, d, d, 1.0));
        add("head.b".into(), Tensor::zeros(&[d]));
        Ok(Self { cfg, names, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn bind_inputs(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.input(p.clone())).collect()
    }

    pub fn bind_constants(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.clone())).collect()
    }

    /// Transformer body on composed `K×D` inputs; `vars` follow `self.params`.
    pub fn forward_term(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let k = g.shape(x)[0];
        if g.shape(x).len() != 2 || g.shape(x)[1] != self.cfg.dim {
            return shape_err(format!("inputs {:?} for model dim {}", g.shape(x), self.cfg.dim));
        }
        if k > self.cfg.max_window {
            return Err(GepError::Capacity { len: k, capacity: self.cfg.max_window });
        }
        if vars.len() != self.params.len() {
            return shape_err("parameter binding does not match the model");
        }
        let heads = self.cfg.heads;
        let dh = self.cfg.dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut h = x;
        for l in 0..self.cfg.layers {
            let p = &vars[2 + l * PER_LAYER..2 + (l + 1) * PER_LAYER];
            let n = norm(g, h, p[0], p[1])?;
            let q = g.matmul(n, p[2])?;
            let kk = g.matmul(n, p[3])?;
            let v = g.matmul(n, p[4])?;
            let mut outs = Vec::with_capacity(heads);
            for head in 0..heads {
                let qh = g.slice_cols(q, head * dh, dh)?;
                let kh = g.slice_cols(kk, head * dh, dh)?;
                let vh = g.slice_cols(v, head * dh, dh)?;
                let kt = g.transpose(kh)?;
                let s = g.matmul(qh, kt)?;
                let s = g.scale(s, scale);
                let a = g.causal_softmax(s)?;
                outs.push(g.matmul(a, vh)?);
            }
            let cat = g.concat_cols(&outs)?;
            let o = g.matmul(cat, p[5])?;
            let o = g.add_row(o, p[6])?;
            h = g.add(h, o)?;
            let n = norm(g, h, p[7], p[8])?;
            let f = g.matmul(n, p[9])?;
            let f = g.add_row(f, p[10])?;
            let f = g.gelu(f);
            let f = g.matmul(f, p[11])?;
            let f = g.add_row(f, p[12])?;
            h = g.add(h, f)?;
        }
        let t = vars.len();
        let n = norm(g, h, vars[t - 4], vars[t - 3])?;
        let y = g.matmul(n, vars[t - 2])?;
        g.add_row(y, vars[t - 1])
    }

    /// Predictions for already-composed inputs.
    pub fn forward(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind_constants(&mut g);
        let x = g.constant(inputs.clone());
        let y = self.forward_term(&mut g, &vars, x)?;
        Ok(g.value(y).clone())
    }

    /// Adds the model's encodings (positions relative to the slice) and runs
    /// the body.
    pub fn sequence_term(&self, g: &mut Graph, vars: &[Var], seq: &TokenSequence) -> Result<Var> {
        let s = g.constant(seq.tokens.clone());
        let x = seq::compose_term(g, s, &seq.modalities, vars[0], vars[1])?;
        self.forward_term(g, vars, x)
    }

    pub fn predict(&self, seq: &TokenSequence) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind_constants(&mut g);
        let y = self.sequence_term(&mut g, &vars, seq)?;
        Ok(g.value(y).clone())
    }

    pub fn window_loss_term(&self, g: &mut Graph, vars: &[Var], window: &ArWindow) -> Result<Var> {
        let y = self.sequence_term(g, vars, &window.input)?;
        let t = g.constant(window.target.tokens.clone());
        pretrain_loss_term(g, y, t)
    }

    pub fn window_loss(&self, window: &ArWindow) -> Result<f64> {
        let preds = self.predict(&window.input)?;
        pretrain_loss(&preds, &window.target.tokens)
    }

    fn window_loss_and_grads(&self, window: &ArWindow) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars = self.bind_inputs(&mut g);
        let loss = self.window_loss_term(&mut g, &vars, window)?;
        let value = g.value(loss).item().expect("scalar loss");
        let grads = g.backward(loss)?;
        Ok((value, vars.iter().map(|&v| grads.get(&g, v)).collect()))
    }
}

fn norm(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = g.layer_norm(x, LN_EPS);
    let n = g.mul_row(n, gain)?;
    g.add_row(n, bias)
}

/// `(1/w) Σ_j ‖pred_j − target_j‖²`.
pub fn pretrain_loss_term(g: &mut Graph, preds: Var, targets: Var) -> Result<Var> {
    if g.shape(preds) != g.shape(targets) || g.shape(preds).len() != 2 {
        return shape_err(format!(
            "predictions {:?} vs targets {:?}",
            g.shape(preds),
            g.shape(targets)
        ));
    }
    let w = g.shape(preds)[0].max(1) as f64;
    let d = g.sub(preds, targets)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / w))
}

pub fn pretrain_loss(preds: &Tensor, targets: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(preds.clone());
    let t = g.constant(targets.clone());
    let l = pretrain_loss_term(&mut g, p, t)?;
    Ok(g.value(l).item().expect("scalar loss"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSpec {
    pub steps: usize,
    pub window: usize,
    /// Windows per optimizer step.
    pub batch: usize,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainSpec {
    pub fn desk(steps: usize, window: usize) -> Self {
        Self {
            steps,
            window,
            batch: 4,
            schedule: LrSchedule {
                peak: 5e-4,
                warmup_steps: 100,
                total_steps: steps,
            },
            weight_decay: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Mini-batch AdamW over randomly placed windows. Windows are drawn
/// sequentially from the seeded generator; per-window gradients may be
/// computed in parallel and are summed in window order.
pub fn train(model: &mut Transformer, sequences: &[TokenSequence], spec: &TrainSpec) -> Result<Vec<LossRecord>> {
    train_with(Exec::default(), model, sequences, spec)
}

pub fn train_with(
    exec: Exec,
    model: &mut Transformer,
    sequences: &[TokenSequence],
    spec: &TrainSpec,
) -> Result<Vec<LossRecord>> {
    if spec.window == 0 || spec.window > model.cfg.max_window {
        return Err(GepError::Capacity { len: spec.window, capacity: model.cfg.max_window });
    }
    if spec.batch == 0 {
        return Err(GepError::Parameter("batch must be positive".into()));
    }
    let usable: Vec<&TokenSequence> = sequences.iter().filter(|s| s.len() > spec.window).collect();
    if usable.is_empty() {
        return Err(GepError::Range(format!(
            "no sequence is longer than the window {}",
            spec.window
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut opt = AdamW::new(&model.params, spec.weight_decay);
    let mut curve = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let windows = (0..spec.batch)
            .map(|_| {
                let s = usable[rng.random_range(0..usable.len())];
                seq::random_window(&mut rng, s, spec.window)
            })
            .collect::<Result<Vec<_>>>()?;
        let m = &*model;
        let parts = par::try_map_range(exec, windows.len(), |i| m.window_loss_and_grads(&windows[i]))?;
        let scale = 1.0 / parts.len() as f64;
        let mut loss = 0.0;
        let mut grads: Vec<Tensor> = model.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        for (l, gs) in &parts {
            loss += l * scale;
            for (acc, g) in grads.iter_mut().zip(gs) {
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += v * scale;
                }
            }
        }
        if !loss.is_finite() {
            return Err(GepError::Divergence { step, loss });
        }
        let lr = spec.schedule.lr(step);
        curve.push(LossRecord { step, lr, loss });
        opt.step(&mut model.params, &grads, lr);
    }
    Ok(curve)
}

/// Mean loss over all stride-`stride` windows of every sequence.
pub fn evaluate_windows(model: &Transformer, sequences: &[TokenSequence], window: usize, stride: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in sequences {
        if s.len() <= window {
            continue;
        }
        let mut start = 0;
        while start + window < s.len() {
            total += model.window_loss(&seq::dense_targets(s, start, window)?)?;
            count += 1;
            start += stride.max(1);
        }
    }
    if count == 0 {
        return Err(GepError::Range("no complete evaluation window".into()));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RolloutSpec {
    pub horizon: usize,
    /// Sliding window length in tokens.
    pub window: usize,
    /// Consecutive tokens per modality in the interleaving pattern.
    pub block: usize,
}

/// Appends `horizon` predicted tokens to `context`. The model sees at most
/// the last `window` tokens, with positions counted from the window start.
/// Each new token repeats the modality found one interleaving period
/// (`2·block`) earlier.
pub fn rollout(model: &Transformer, context: &TokenSequence, spec: &RolloutSpec) -> Result<TokenSequence> {
    if context.is_empty() {
        return Err(GepError::Range("rollout needs a non-empty context".into()));
    }
    if spec.window == 0 || spec.window > model.cfg.max_window {
        return Err(GepError::Capacity { len: spec.window, capacity: model.cfg.max_window });
    }
    if context.len() > spec.window {
        return Err(GepError::Capacity { len: context.len(), capacity: spec.window });
    }
    let period = 2 * spec.block.max(1);
    if spec.horizon > 0 && context.len() < period {
        return Err(GepError::Range(format!(
            "context of {} tokens is shorter than one interleaving period {period}",
            context.len()
        )));
    }
    let mut out = context.clone();
    for _ in 0..spec.horizon {
        let start = out.len().saturating_sub(spec.window);
        let view = out.slice(start, out.len() - start)?;
        let preds = model.predict(&view)?;
        let next = preds.row(preds.rows() - 1).to_vec();
        let modality: Modality = out.modalities[out.len() - period];
        out.push(&next, modality)?;
    }
    Ok(out)
}

pub fn write_loss_curve<W: Write>(mut w: W, curve: &[LossRecord]) -> Result<()> {
    writeln!(w, "step,lr,loss")?;
    for r in curve {
        writeln!(w, "{},{:e},{:e}", r.step, r.lr, r.loss)?;
    }
    Ok(())
}

/// Layout: magic `GEPCKPT1`, `u64` config length, config as TOML text,
/// `u64` tensor count, then one tensor record per parameter (see
/// [`crate::blob`]).
pub fn write_checkpoint<W: Write>(model: &Transformer, mut w: W) -> Result<()> {
    let cfg = toml::to_string(&model.cfg).map_err(|e| GepError::Format(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u64(&mut w, cfg.len() as u64)?;
    w.write_all(cfg.as_bytes())?;
    write_u64(&mut w, model.params.len() as u64)?;
    for (name, t) in model.names.iter().zip(&model.params) {
        write_record(&mut w, name, t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Transformer> {
    expect_magic(&mut r, CHECKPOINT_MAGIC)?;
    let len = read_u64(&mut r)?;
    if len > 1 << 20 {
        return Err(GepError::Format(format!("config of {len} bytes")));
    }
    let mut text = vec![0u8; len as usize];
    read_exact(&mut r, &mut text)?;
    let text = String::from_utf8(text).map_err(|_| GepError::Format("config is not UTF-8".into()))?;
    let cfg: TransformerConfig = toml::from_str(&text).map_err(|e| GepError::Format(e.to_string()))?;
    let mut model = Transformer::new(cfg).map_err(|e| GepError::Format(e.to_string()))?;
    let n = read_u64(&mut r)? as usize;
    if n != model.params.len() {
        return Err(GepError::Format(format!("{n} tensors, model has {}", model.params.len())));
    }
    for i in 0..n {
        let (name, t) = read_record(&mut r)?;
        if name != model.names[i] {
            return Err(GepError::Format(format!("tensor {i} is {name:?}, expected {}", model.names[i])));
        }
        if t.shape() != model.params[i].shape() {
            return Err(GepError::Format(format!("tensor {name} has shape {:?}", t.shape())));
        }
        model.params[i] = t;
    }
    Ok(model)
}
