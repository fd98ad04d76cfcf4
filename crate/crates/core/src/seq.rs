//! Multimodal token sequences, additive encodings and autoregressive windows.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, GepError, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Event,
    Image,
}

impl Modality {
    pub fn index(self) -> usize {
        match self {
            Modality::Event => 0,
            Modality::Image => 1,
        }
    }

    pub fn from_index(i: u8) -> Option<Self> {
        match i {
            0 => Some(Modality::Event),
            1 => Some(Modality::Image),
            _ => None,
        }
    }
}

/// `K` embeddings with their modality labels; positions are `0..K`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub modalities: Vec<Modality>,
}

impl TokenSequence {
    pub fn new(tokens: Tensor, modalities: Vec<Modality>) -> Result<Self> {
        if tokens.ndim() != 2 || tokens.rows() != modalities.len() {
            return shape_err(format!(
                "{:?} tokens with {} modality labels",
                tokens.shape(),
                modalities.len()
            ));
        }
        Ok(Self { tokens, modalities })
    }

    pub fn len(&self) -> usize {
        self.modalities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modalities.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn positions(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// Tokens `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(GepError::Range(format!(
                "slice {}..{} of a {}-token sequence",
                start,
                start + len,
                self.len()
            )));
        }
        Ok(Self {
            tokens: self.tokens.slice_rows(start, len)?,
            modalities: self.modalities[start..start + len].to_vec(),
        })
    }

    pub fn push(&mut self, token: &[f64], modality: Modality) -> Result<()> {
        if token.len() != self.dim() {
            return shape_err(format!("token of width {} for dim {}", token.len(), self.dim()));
        }
        let mut data = std::mem::replace(&mut self.tokens, Tensor::zeros(&[0, 0])).into_data();
        data.extend_from_slice(token);
        self.tokens = Tensor::new(&[self.modalities.len() + 1, token.len()], data)?;
        self.modalities.push(modality);
        Ok(())
    }

    /// Binary layout: `u64 K`, `u64 D`, `u64 max_len`, `K·D` little-endian
    /// `f64` row-major, then `K` modality bytes (0 event, 1 image).
    pub fn write_to<W: Write>(&self, mut w: W, max_len: usize) -> Result<()> {
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        w.write_all(&(max_len as u64).to_le_bytes())?;
        for v in self.tokens.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        let mods: Vec<u8> = self.modalities.iter().map(|m| m.index() as u8).collect();
        w.write_all(&mods)?;
        w.flush()?;
        Ok(())
    }

    /// Inverse of [`TokenSequence::write_to`]; returns the sequence and `max_len`.
    pub fn read_from<R: Read>(mut r: R) -> Result<(Self, usize)> {
        let mut u = [0u8; 8];
        let mut next = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut u)
                .map_err(|_| GepError::Format("truncated sequence header".into()))?;
            Ok(u64::from_le_bytes(u))
        };
        let k = next(&mut r)? as usize;
        let d = next(&mut r)? as usize;
        let max_len = next(&mut r)? as usize;
        let mut payload = vec![0u8; k * d * 8];
        r.read_exact(&mut payload)
            .map_err(|_| GepError::Format("truncated sequence payload".into()))?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut mods = vec![0u8; k];
        r.read_exact(&mut mods)
            .map_err(|_| GepError::Format("truncated modality bytes".into()))?;
        let modalities = mods
            .iter()
            .map(|&b| Modality::from_index(b).ok_or_else(|| GepError::Format(format!("modality byte {b}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok((Self::new(Tensor::new(&[k, d], data)?, modalities)?, max_len))
    }
}

/// Learned positional (`max_len×D`) and modality (`2×D`) tables.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingTables {
    pub positional: Tensor,
    pub modality: Tensor,
}

impl EncodingTables {
    pub fn zeros(max_len: usize, dim: usize) -> Self {
        Self {
            positional: Tensor::zeros(&[max_len, dim]),
            modality: Tensor::zeros(&[2, dim]),
        }
    }

    /// Unit-variance Gaussian initialization scaled by `std`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, max_len: usize, dim: usize, std: f64) -> Self {
        Self {
            positional: Tensor::randn(rng, &[max_len, dim], std),
            modality: Tensor::randn(rng, &[2, dim], std),
        }
    }

    pub fn max_len(&self) -> usize {
        self.positional.rows()
    }

    pub fn dim(&self) -> usize {
        self.positional.cols()
    }
}

/// Index lists that pick the positional and modality rows for each token.
fn encoding_rows(len: usize, dim: usize, modalities: &[Modality]) -> (Vec<usize>, Vec<usize>) {
    let mut pos = Vec::with_capacity(len * dim);
    let mut modal = Vec::with_capacity(len * dim);
    for (k, m) in modalities.iter().enumerate() {
        for j in 0..dim {
            pos.push(k * dim + j);
            modal.push(m.index() * dim + j);
        }
    }
    (pos, modal)
}

/// `X_k = S_k + P_k + M_k` on a graph, with the tables given as vars.
pub fn compose_term(
    g: &mut Graph,
    tokens: Var,
    modalities: &[Modality],
    positional: Var,
    modality: Var,
) -> Result<Var> {
    let (k, d) = (g.shape(tokens)[0], g.shape(tokens)[1]);
    let max_len = g.shape(positional)[0];
    if k > max_len {
        return Err(GepError::Capacity { len: k, capacity: max_len });
    }
    if g.shape(positional)[1] != d || modalities.len() != k {
        return shape_err("encoding tables do not match the token sequence");
    }
    let (pi, mi) = encoding_rows(k, d, modalities);
    let p = g.gather(positional, pi, &[k, d])?;
    let m = g.gather(modality, mi, &[k, d])?;
    let sp = g.add(tokens, p)?;
    g.add(sp, m)
}

pub fn compose_tokens(seq: &TokenSequence, enc: &EncodingTables) -> Result<Tensor> {
    let mut g = Graph::new();
    let t = g.constant(seq.tokens.clone());
    let p = g.constant(enc.positional.clone());
    let m = g.constant(enc.modality.clone());
    let x = compose_term(&mut g, t, &seq.modalities, p, m)?;
    Ok(g.value(x).clone())
}

/// Interleaves paired streams per time step, `q` tokens at a time:
/// `q` event tokens of step 0, `q` image tokens of step 0, and so on.
pub fn interleave_blocks(event: &Tensor, image: &Tensor, q: usize, event_first: bool) -> Result<TokenSequence> {
    if event.ndim() != 2 || image.ndim() != 2 || event.cols() != image.cols() {
        return shape_err(format!("streams {:?} and {:?}", event.shape(), image.shape()));
    }
    if q == 0 || !event.rows().is_multiple_of(q) || !image.rows().is_multiple_of(q) || event.rows() != image.rows() {
        return Err(GepError::Pairing {
            events: event.rows() / q.max(1),
            images: image.rows() / q.max(1),
        });
    }
    let steps = event.rows() / q;
    let d = event.cols();
    let mut data = Vec::with_capacity(2 * event.len());
    let mut mods = Vec::with_capacity(2 * event.rows());
    let order = if event_first {
        [(event, Modality::Event), (image, Modality::Image)]
    } else {
        [(image, Modality::Image), (event, Modality::Event)]
    };
    for s in 0..steps {
        for (src, m) in order {
            data.extend_from_slice(&src.data()[s * q * d..(s + 1) * q * d]);
            mods.extend(std::iter::repeat_n(m, q));
        }
    }
    TokenSequence::new(Tensor::new(&[2 * event.rows(), d], data)?, mods)
}

/// One event token then one image token per step.
pub fn interleave(event_feats: &Tensor, image_feats: &Tensor) -> Result<TokenSequence> {
    if event_feats.rows() != image_feats.rows() {
        return Err(GepError::Pairing {
            events: event_feats.rows(),
            images: image_feats.rows(),
        });
    }
    interleave_blocks(event_feats, image_feats, 1, true)
}

/// Image-only subsequence for samples without paired events.
pub fn image_only(image_feats: &Tensor) -> Result<TokenSequence> {
    TokenSequence::new(image_feats.clone(), vec![Modality::Image; image_feats.rows()])
}

/// Splits an interleaved sequence back into its event and image streams.
pub fn deinterleave(seq: &TokenSequence) -> Result<(Tensor, Tensor)> {
    let pick = |m: Modality| -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = (0..seq.len())
            .filter(|&k| seq.modalities[k] == m)
            .map(|k| seq.tokens.row(k).to_vec())
            .collect();
        if rows.is_empty() {
            return Tensor::new(&[0, seq.dim()], vec![]);
        }
        Tensor::from_rows(&rows)
    };
    Ok((pick(Modality::Event)?, pick(Modality::Image)?))
}

/// Input slice and its one-step-shifted targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ArWindow {
    pub start: usize,
    pub len: usize,
    pub input: TokenSequence,
    pub target: TokenSequence,
}

/// Input `S[s..s+w]`, target `S[s+1..s+w+1]`.
pub fn dense_targets(seq: &TokenSequence, start: usize, len: usize) -> Result<ArWindow> {
    if len == 0 || start + len + 1 > seq.len() {
        return Err(GepError::Range(format!(
            "window start {start} length {len} needs {} tokens, sequence has {}",
            start + len + 1,
            seq.len()
        )));
    }
    Ok(ArWindow {
        start,
        len,
        input: seq.slice(start, len)?,
        target: seq.slice(start + 1, len)?,
    })
}

/// Window with a uniformly drawn start index.
pub fn random_window<R: Rng + ?Sized>(rng: &mut R, seq: &TokenSequence, len: usize) -> Result<ArWindow> {
    if len == 0 || len + 1 > seq.len() {
        return Err(GepError::Range(format!(
            "window length {len} needs {} tokens, sequence has {}",
            len + 1,
            seq.len()
        )));
    }
    let start = rng.random_range(0..=seq.len() - len - 1);
    dense_targets(seq, start, len)
}

/// Independent mean pooling along time and space, concatenated.
///
/// `tokens` is `T×Q×D` (time steps × spatial tokens × dim). The temporal
/// branch averages groups of `temporal_pool` consecutive steps per spatial
/// token, giving `(T/tp)·Q` tokens ordered by pooled step; the spatial branch
/// averages groups of `spatial_pool` consecutive spatial tokens per step,
/// giving `T·(Q/sp)` tokens. Pooled groups take the modality of their first
/// time step.
pub fn aggregate_tokens(
    tokens: &Tensor,
    step_modalities: &[Modality],
    temporal_pool: usize,
    spatial_pool: usize,
) -> Result<TokenSequence> {
    if tokens.ndim() != 3 {
        return shape_err(format!("expected T×Q×D tokens, got {:?}", tokens.shape()));
    }
    let (t, q, d) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
    if step_modalities.len() != t {
        return shape_err("one modality per time step required");
    }
    if temporal_pool == 0 || spatial_pool == 0 || t % temporal_pool != 0 || q % spatial_pool != 0 {
        return shape_err(format!(
            "pool factors ({temporal_pool}, {spatial_pool}) must divide (T={t}, Q={q})"
        ));
    }
    let at = |s: usize, p: usize| &tokens.data()[(s * q + p) * d..(s * q + p + 1) * d];
    let mut data = Vec::new();
    let mut mods = Vec::new();
    for g in 0..t / temporal_pool {
        for p in 0..q {
            let mut acc = vec![0.0; d];
            for s in g * temporal_pool..(g + 1) * temporal_pool {
                for (a, v) in acc.iter_mut().zip(at(s, p)) {
                    *a += v;
                }
            }
            data.extend(acc.iter().map(|a| a / temporal_pool as f64));
            mods.push(step_modalities[g * temporal_pool]);
        }
    }
    for s in 0..t {
        for g in 0..q / spatial_pool {
            let mut acc = vec![0.0; d];
            for p in g * spatial_pool..(g + 1) * spatial_pool {
                for (a, v) in acc.iter_mut().zip(at(s, p)) {
                    *a += v;
                }
            }
            data.extend(acc.iter().map(|a| a / spatial_pool as f64));
            mods.push(step_modalities[s]);
        }
    }
    TokenSequence::new(Tensor::new(&[mods.len(), d], data)?, mods)
}
