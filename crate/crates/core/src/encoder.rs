//! Patch-token encoder shared by the event student and the frozen image
//! teacher, and the alignment training loop.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{total_alignment_term, AlignWeights, ProjectionHead};
use crate::error::{shape_err, GepError, Result};
use crate::events::PseudoFrame;
use crate::lm::LossRecord;
use crate::tensor::{AdamW, Graph, LrSchedule, Tensor, Var};

pub const CHANNELS: usize = 3;

/// `tokens = tanh(patches·W1 + b1)·W2 + b2`, one token per non-overlapping
/// `P×P` patch; the feature vector is the token mean.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEncoder {
    pub patch: usize,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl PatchEncoder {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, patch: usize, hidden: usize, dim: usize) -> Self {
        let fan_in = CHANNELS * patch * patch;
        Self {
            patch,
            w1: Tensor::randn(rng, &[fan_in, hidden], 1.0 / (fan_in as f64).sqrt()),
            b1: Tensor::randn(rng, &[hidden], 0.1),
            w2: Tensor::randn(rng, &[hidden, dim], 1.0 / (hidden as f64).sqrt()),
            b2: Tensor::zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.w1.clone(), self.b1.clone(), self.w2.clone(), self.b2.clone()]
    }

    pub fn set_params(&mut self, params: &[Tensor]) -> Result<()> {
        let current = self.params();
        if params.len() != current.len() || params.iter().zip(&current).any(|(a, b)| a.shape() != b.shape()) {
            return shape_err("encoder parameter shapes do not match");
        }
        self.w1 = params[0].clone();
        self.b1 = params[1].clone();
        self.w2 = params[2].clone();
        self.b2 = params[3].clone();
        Ok(())
    }

    /// `(B·L)×(3P²)` patches to `(B·L)×D` tokens; `vars` follow [`Self::params`].
    pub fn tokens_term(g: &mut Graph, patches: Var, vars: &[Var]) -> Result<Var> {
        let z = g.matmul(patches, vars[0])?;
        let z = g.add_row(z, vars[1])?;
        let z = g.tanh(z);
        let z = g.matmul(z, vars[2])?;
        g.add_row(z, vars[3])
    }

    /// Mean token of each of the `B` images: `B×D`.
    pub fn features_term(g: &mut Graph, patches: Var, per_image: usize, vars: &[Var]) -> Result<Var> {
        let t = Self::tokens_term(g, patches, vars)?;
        g.group_mean_rows(t, per_image)
    }

    fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params().into_iter().map(|p| g.constant(p)).collect()
    }

    pub fn tokens(&self, patches: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.constant(patches.clone());
        let vars = self.bind(&mut g);
        let t = Self::tokens_term(&mut g, p, &vars)?;
        Ok(g.value(t).clone())
    }

    pub fn features(&self, batch: &PatchBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.constant(batch.patches.clone());
        let vars = self.bind(&mut g);
        let f = Self::features_term(&mut g, p, batch.per_image, &vars)?;
        Ok(g.value(f).clone())
    }
}

/// Patch rows of several equally sized images, image-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    pub patches: Tensor,
    pub per_image: usize,
}

impl PatchBatch {
    pub fn images(&self) -> usize {
        self.patches.rows() / self.per_image.max(1)
    }

    pub fn select(&self, indices: &[usize]) -> Result<PatchBatch> {
        let parts = indices
            .iter()
            .map(|&i| self.patches.slice_rows(i * self.per_image, self.per_image))
            .collect::<Result<Vec<_>>>()?;
        Ok(PatchBatch {
            patches: Tensor::concat_rows(&parts)?,
            per_image: self.per_image,
        })
    }
}

/// Splits `H×W×3` row-major images into `P×P` patches ordered row-major;
/// each patch row lists `(dy, dx, channel)` in row-major order.
pub fn patchify(images: &[&[f64]], height: usize, width: usize, patch: usize) -> Result<PatchBatch> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return shape_err(format!("patch {patch} does not tile {height}×{width}"));
    }
    let (ph, pw) = (height / patch, width / patch);
    let row = CHANNELS * patch * patch;
    let mut data = Vec::with_capacity(images.len() * ph * pw * row);
    for img in images {
        if img.len() != height * width * CHANNELS {
            return shape_err(format!("image of {} values for {height}×{width}×3", img.len()));
        }
        for py in 0..ph {
            for px in 0..pw {
                for dy in 0..patch {
                    let start = ((py * patch + dy) * width + px * patch) * CHANNELS;
                    data.extend_from_slice(&img[start..start + patch * CHANNELS]);
                }
            }
        }
    }
    Ok(PatchBatch {
        patches: Tensor::new(&[images.len() * ph * pw, row], data)?,
        per_image: ph * pw,
    })
}

pub fn frame_patches(frames: &[PseudoFrame], patch: usize) -> Result<PatchBatch> {
    let first = frames.first().ok_or_else(|| GepError::Shape("no frames".into()))?;
    let views: Vec<&[f64]> = frames.iter().map(|f| f.data.as_slice()).collect();
    patchify(&views, first.height(), first.width(), patch)
}

/// Intensity images replicated into three channels.
pub fn image_patches(images: &[Tensor], patch: usize) -> Result<PatchBatch> {
    let first = images.first().ok_or_else(|| GepError::Shape("no images".into()))?;
    let (h, w) = (first.shape()[0], first.shape()[1]);
    let rgb: Vec<Vec<f64>> = images
        .iter()
        .map(|im| im.data().iter().flat_map(|&v| [v; CHANNELS]).collect())
        .collect();
    let views: Vec<&[f64]> = rgb.iter().map(Vec::as_slice).collect();
    patchify(&views, h, w, patch)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignTrainSpec {
    pub steps: usize,
    pub batch: usize,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub seed: u64,
}

/// Trains the student encoder and projection head against precomputed,
/// frozen teacher features. `events` and `images` hold the paired samples.
pub fn train_alignment(
    student: &mut PatchEncoder,
    head: &mut ProjectionHead,
    teacher_features: &Tensor,
    events: &PatchBatch,
    images: &PatchBatch,
    weights: &AlignWeights,
    spec: &AlignTrainSpec,
) -> Result<Vec<LossRecord>> {
    weights.validate()?;
    let n = events.images();
    if images.images() != n || teacher_features.rows() != n {
        return Err(GepError::Pairing { events: n, images: images.images() });
    }
    if spec.batch < 2 || spec.batch > n {
        return Err(GepError::Parameter(format!("batch {} for {n} samples", spec.batch)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut params = student.params();
    params.extend(head.params());
    let mut opt = AdamW::new(&params, spec.weight_decay);
    let mut curve = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let idx = sample(&mut rng, n, spec.batch).into_vec();
        let ev = events.select(&idx)?;
        let im = images.select(&idx)?;
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| teacher_features.row(i).to_vec()).collect();
        let zi = Tensor::from_rows(&rows)?;

        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.input(p.clone())).collect();
        let pe = g.constant(ev.patches);
        let pi = g.constant(im.patches);
        let ze = PatchEncoder::features_term(&mut g, pe, ev.per_image, &vars[..4])?;
        let ze_img = PatchEncoder::features_term(&mut g, pi, im.per_image, &vars[..4])?;
        let zi = g.constant(zi);
        let hv = head.bind_vars(&vars[4..]);
        let loss = total_alignment_term(&mut g, ze, zi, ze_img, weights, &hv)?;
        let value = g.value(loss).item().expect("scalar loss");
        if !value.is_finite() {
            return Err(GepError::Divergence { step, loss: value });
        }
        let grads = g.backward(loss)?;
        let grads: Vec<Tensor> = vars.iter().map(|&v| grads.get(&g, v)).collect();
        let lr = spec.schedule.lr(step);
        curve.push(LossRecord { step, lr, loss: value });
        opt.step(&mut params, &grads, lr);
    }
    student.set_params(&params[..4])?;
    head.set_params(&params[4..]);
    Ok(curve)
}

/// Encoder followed by a linear classifier, trained with cross-entropy on
/// labelled images. The trained encoder serves as the frozen teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub encoder: PatchEncoder,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, encoder: PatchEncoder, classes: usize) -> Self {
        let d = encoder.dim();
        Self {
            encoder,
            weight: Tensor::randn(rng, &[d, classes], 1.0 / (d as f64).sqrt()),
            bias: Tensor::zeros(&[classes]),
        }
    }

    fn logits_term(g: &mut Graph, batch: &PatchBatch, vars: &[Var]) -> Result<Var> {
        let p = g.constant(batch.patches.clone());
        let f = PatchEncoder::features_term(g, p, batch.per_image, &vars[..4])?;
        let z = g.matmul(f, vars[4])?;
        g.add_row(z, vars[5])
    }

    pub fn logits(&self, batch: &PatchBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params().into_iter().map(|p| g.constant(p)).collect();
        let z = Self::logits_term(&mut g, batch, &vars)?;
        Ok(g.value(z).clone())
    }

    fn params(&self) -> Vec<Tensor> {
        let mut p = self.encoder.params();
        p.extend([self.weight.clone(), self.bias.clone()]);
        p
    }

    pub fn train(&mut self, images: &PatchBatch, labels: &[u32], spec: &AlignTrainSpec) -> Result<Vec<LossRecord>> {
        let n = images.images();
        let classes = self.weight.cols();
        if labels.len() != n {
            return shape_err(format!("{n} images with {} labels", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(GepError::InvalidLabel { label: bad as usize, classes });
        }
        if spec.batch == 0 || spec.batch > n {
            return Err(GepError::Parameter(format!("batch {} for {n} samples", spec.batch)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = self.params();
        let mut opt = AdamW::new(&params, spec.weight_decay);
        let mut curve = Vec::with_capacity(spec.steps);
        for step in 0..spec.steps {
            let idx = sample(&mut rng, n, spec.batch).into_vec();
            let batch = images.select(&idx)?;
            let mut g = Graph::new();
            let vars: Vec<Var> = params.iter().map(|p| g.input(p.clone())).collect();
            let z = Self::logits_term(&mut g, &batch, &vars)?;
            let lp = g.log_softmax(z);
            let picked: Vec<usize> = idx.iter().enumerate().map(|(r, &i)| r * classes + labels[i] as usize).collect();
            let sel = g.gather(lp, picked, &[idx.len()])?;
            let s = g.mean(sel);
            let loss = g.scale(s, -1.0);
            let value = g.value(loss).item().expect("scalar loss");
            if !value.is_finite() {
                return Err(GepError::Divergence { step, loss: value });
            }
            let grads = g.backward(loss)?;
            let grads: Vec<Tensor> = vars.iter().map(|&v| grads.get(&g, v)).collect();
            let lr = spec.schedule.lr(step);
            curve.push(LossRecord { step, lr, loss: value });
            opt.step(&mut params, &grads, lr);
        }
        self.encoder.set_params(&params[..4])?;
        self.weight = params[4].clone();
        self.bias = params[5].clone();
        Ok(curve)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    #[test]
    fn patch_layout() {
        let (h, w, p) = (4, 6, 2);
        let img: Vec<f64> = (0..h * w * 3).map(|v| v as f64).collect();
        let b = patchify(&[&img], h, w, p).unwrap();
        assert_eq!(b.per_image, 6);
        assert_eq!(b.patches.shape(), &[6, 12]);
        for t in 0..6 {
            let (py, px) = (t / 3, t % 3);
            for dy in 0..2 {
                for dx in 0..2 {
                    for c in 0..3 {
                        let src = ((py * 2 + dy) * w + px * 2 + dx) * 3 + c;
                        assert_eq!(b.patches.at(t, (dy * 2 + dx) * 3 + c), img[src]);
                    }
                }
            }
        }
        assert!(patchify(&[&img], h, w, 4).is_err());
    }

    #[test]
    fn features_are_token_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = PatchEncoder::random(&mut rng, 2, 6, 5);
        let imgs = [Tensor::uniform(&mut rng, &[4, 4], 0.0, 1.0), Tensor::uniform(&mut rng, &[4, 4], 0.0, 1.0)];
        let b = image_patches(&imgs, 2).unwrap();
        let f = enc.features(&b).unwrap();
        let t = enc.tokens(&b.patches).unwrap();
        for i in 0..2 {
            for j in 0..5 {
                let m = (0..4).map(|k| t.at(i * 4 + k, j)).sum::<f64>() / 4.0;
                assert!((f.at(i, j) - m).abs() < 1e-15);
            }
        }
        let r = grad_check(
            |g: &mut Graph, v: &[Var]| {
                let p = g.constant(b.patches.clone());
                let f = PatchEncoder::features_term(g, p, 4, v)?;
                let s = g.square(f);
                Ok(g.sum(s))
            },
            &enc.params(),
            1e-5,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
