//! Linear patch decoding, segmentation loss and the depth loss stack.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, GepError, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const DICE_SMOOTH: f64 = 1.0;
pub const MASK_EPS: f64 = 1e-8;

/// `D×(C·P²)` weight mapping each token to its `P×P` cell of `C` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDecoder {
    pub weight: Tensor,
    pub patch: usize,
    pub classes: usize,
}

impl PatchDecoder {
    pub fn new(weight: Tensor, patch: usize, classes: usize) -> Result<Self> {
        if weight.ndim() != 2 || patch == 0 || classes == 0 || weight.cols() != classes * patch * patch {
            return shape_err(format!(
                "decoder weight {:?} for {classes} classes and patch {patch}",
                weight.shape()
            ));
        }
        Ok(Self { weight, patch, classes })
    }

    pub fn dim(&self) -> usize {
        self.weight.rows()
    }

    fn layout(&self, tokens: usize, height: usize, width: usize) -> Result<Vec<usize>> {
        let p = self.patch;
        if !height.is_multiple_of(p) || !width.is_multiple_of(p) || tokens != (height / p) * (width / p) {
            return shape_err(format!(
                "{tokens} tokens cannot tile {height}×{width} with patch {p}"
            ));
        }
        Ok(patch_index(self.classes, p, height, width))
    }

    /// Graph form of [`linear_patch_decode`] with the weight as a var.
    pub fn decode_term(&self, g: &mut Graph, tokens: Var, weight: Var, height: usize, width: usize) -> Result<Var> {
        let l = g.shape(tokens)[0];
        let index = self.layout(l, height, width)?;
        let flat = g.matmul(tokens, weight)?;
        g.gather(flat, index, &[self.classes, height, width])
    }

    /// Recovers tokens from decoded logits; requires a square invertible weight.
    pub fn invert(&self, logits: &Tensor) -> Result<Tensor> {
        let per_token = patch_tokens(logits, self.patch)?;
        per_token.matmul(&self.weight.inverse()?)
    }
}

/// For each output element `(c, y, x)` the flat index into `L×(C·P²)`.
fn patch_index(classes: usize, p: usize, height: usize, width: usize) -> Vec<usize> {
    let cols = width / p;
    let cp = classes * p * p;
    let mut index = Vec::with_capacity(classes * height * width);
    for c in 0..classes {
        for y in 0..height {
            for x in 0..width {
                let token = (y / p) * cols + x / p;
                let within = c * p * p + (y % p) * p + x % p;
                index.push(token * cp + within);
            }
        }
    }
    index
}

/// `Ŷ = rearrange(F·W)`: `L×D` tokens to `C×H×W` logits, tokens in
/// row-major patch order.
pub fn linear_patch_decode(tokens: &Tensor, dec: &PatchDecoder, height: usize, width: usize) -> Result<Tensor> {
    if tokens.ndim() != 2 || tokens.cols() != dec.dim() {
        return shape_err(format!("tokens {:?} for decoder dim {}", tokens.shape(), dec.dim()));
    }
    let mut g = Graph::new();
    let t = g.constant(tokens.clone());
    let w = g.constant(dec.weight.clone());
    let y = dec.decode_term(&mut g, t, w, height, width)?;
    Ok(g.value(y).clone())
}

/// Inverse rearrangement: `C×H×W` back to `L×(C·P²)`.
pub fn patch_tokens(logits: &Tensor, patch: usize) -> Result<Tensor> {
    if logits.ndim() != 3 || patch == 0 || !logits.shape()[1].is_multiple_of(patch) || !logits.shape()[2].is_multiple_of(patch) {
        return shape_err(format!("logits {:?} with patch {patch}", logits.shape()));
    }
    let (c, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let l = (h / patch) * (w / patch);
    let mut out = vec![0.0; logits.len()];
    for (src, dst) in patch_index(c, patch, h, w).into_iter().enumerate() {
        out[dst] = logits.data()[src];
    }
    Tensor::new(&[l, c * patch * patch], out)
}

fn check_labels(labels: &[u32], classes: usize, ignore: Option<u32>) -> Result<()> {
    for &l in labels {
        if Some(l) != ignore && l as usize >= classes {
            return Err(GepError::InvalidLabel { label: l as usize, classes });
        }
    }
    Ok(())
}

/// `0.5·CE + 0.5·soft Dice` over `C×H×W` logits. Pixels labelled `ignore`
/// are excluded from both terms.
pub fn seg_loss_term(g: &mut Graph, logits: Var, labels: &[u32], ignore: Option<u32>) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 3 || labels.len() != s[1] * s[2] {
        return shape_err(format!("logits {s:?} with {} labels", labels.len()));
    }
    let (c, n) = (s[0], s[1] * s[2]);
    check_labels(labels, c, ignore)?;
    let index: Vec<usize> = (0..n).flat_map(|p| (0..c).map(move |k| k * n + p)).collect();
    let pix = g.gather(logits, index, &[n, c])?;
    let logp = g.log_softmax(pix);

    let valid: Vec<usize> = (0..n).filter(|&p| Some(labels[p]) != ignore).collect();
    let picked = g.gather(logp, valid.iter().map(|&p| p * c + labels[p] as usize).collect(), &[valid.len()])?;
    let ce_sum = g.sum(picked);
    let ce = g.scale(ce_sum, -1.0 / valid.len().max(1) as f64);

    let mut onehot = vec![0.0; n * c];
    let mut keep = vec![0.0; n * c];
    let mut gsum = vec![0.0; c];
    for &p in &valid {
        onehot[p * c + labels[p] as usize] = 1.0;
        gsum[labels[p] as usize] += 1.0;
        keep[p * c..(p + 1) * c].fill(1.0);
    }
    let prob = g.exp(logp);
    let keep = g.constant(Tensor::new(&[n, c], keep)?);
    let prob = g.mul(prob, keep)?;
    let onehot = g.constant(Tensor::new(&[n, c], onehot)?);
    let inter = g.mul(prob, onehot)?;
    let inter_t = g.transpose(inter)?;
    let inter_c = g.row_sum(inter_t);
    let prob_t = g.transpose(prob)?;
    let psum = g.row_sum(prob_t);
    let num = g.scale(inter_c, 2.0);
    let num = g.add_scalar(num, DICE_SMOOTH);
    let gsum = g.constant(Tensor::vector(gsum));
    let den = g.add(psum, gsum)?;
    let den = g.add_scalar(den, DICE_SMOOTH);
    let ratio = g.div(num, den)?;
    let mean_ratio = g.mean(ratio);
    let neg = g.scale(mean_ratio, -1.0);
    let dice = g.add_scalar(neg, 1.0);

    let total = g.add(ce, dice)?;
    Ok(g.scale(total, 0.5))
}

pub fn seg_loss(logits: &Tensor, labels: &[u32], ignore: Option<u32>) -> Result<f64> {
    scalar(|g| {
        let l = g.constant(logits.clone());
        seg_loss_term(g, l, labels, ignore)
    })
}

/// Per-pixel argmax over classes of `C×H×W` logits; ties go to the lower class.
pub fn argmax_labels(logits: &Tensor) -> Result<Vec<u32>> {
    if logits.ndim() != 3 {
        return shape_err(format!("logits {:?}", logits.shape()));
    }
    let (c, n) = (logits.shape()[0], logits.shape()[1] * logits.shape()[2]);
    Ok((0..n)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if logits.data()[k * n + p] > logits.data()[best * n + p] {
                    best = k;
                }
            }
            best as u32
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub d_min: f64,
    pub d_max: f64,
}

impl DepthRange {
    pub fn new(d_min: f64, d_max: f64) -> Result<Self> {
        let r = Self { d_min, d_max };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0 && self.d_max > self.d_min && self.d_max.is_finite()) {
            return Err(GepError::Parameter(format!(
                "depth range needs 0 < d_min < d_max, got ({}, {})",
                self.d_min, self.d_max
            )));
        }
        Ok(())
    }

    pub fn log_min(&self) -> f64 {
        self.d_min.ln()
    }

    pub fn log_span(&self) -> f64 {
        self.d_max.ln() - self.d_min.ln()
    }
}

/// `D = exp(clamp(y, 0, 1)·Δℓ + ℓ_min)`; the endpoints map to `d_min` and
/// `d_max` exactly.
pub fn denorm_log_depth(y_norm: &Tensor, range: &DepthRange) -> Tensor {
    y_norm.map(|y| {
        let y = if y.is_nan() { 0.0 } else { y.clamp(0.0, 1.0) };
        if y == 0.0 {
            range.d_min
        } else if y == 1.0 {
            range.d_max
        } else {
            (y * range.log_span() + range.log_min()).exp()
        }
    })
}

/// Inverse of [`denorm_log_depth`] for depths inside the range.
pub fn log_normalize_depth(depth: &Tensor, range: &DepthRange) -> Tensor {
    depth.map(|d| (d.ln() - range.log_min()) / range.log_span())
}

pub fn masked_mean(x: &Tensor, mask: &Tensor, eps: f64) -> Result<f64> {
    scalar(|g| {
        let v = g.constant(x.clone());
        g.masked_mean(v, mask, eps)
    })
}

fn check_depths(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() || pred.shape() != mask.shape() || pred.ndim() != 2 {
        return shape_err(format!(
            "depth {:?}, target {:?}, mask {:?}",
            pred.shape(),
            gt.shape(),
            mask.shape()
        ));
    }
    for (i, ((&p, &t), &m)) in pred.data().iter().zip(gt.data()).zip(mask.data()).enumerate() {
        if m != 0.0 && !(p > 0.0 && t > 0.0) {
            return Err(GepError::Domain(format!(
                "non-positive depth at valid pixel {i}: prediction {p}, target {t}"
            )));
        }
    }
    Ok(())
}

/// `sqrt(⟨y²⟩ − λ⟨y⟩²)` with `y = log pred − log gt` over valid pixels.
/// The ε guard only applies to an empty mask, so that λ = 1 stays exactly
/// scale invariant.
pub fn silog_term(g: &mut Graph, pred: Var, gt: &Tensor, mask: &Tensor, lambda: f64) -> Result<Var> {
    check_depths(g.value(pred), gt, mask)?;
    let eps = if mask.data().iter().any(|&m| m != 0.0) { 0.0 } else { MASK_EPS };
    let p = g.mask_fill(pred, mask, 1.0)?;
    let lp = g.log(p);
    let lg = gt.data().iter().zip(mask.data()).map(|(&t, &m)| if m != 0.0 { t.ln() } else { 0.0 });
    let lg = g.constant(Tensor::new(gt.shape(), lg.collect())?);
    let y = g.sub(lp, lg)?;
    let y2 = g.square(y);
    let m2 = g.masked_mean(y2, mask, eps)?;
    let m1 = g.masked_mean(y, mask, eps)?;
    let m1sq = g.square(m1);
    let bias = g.scale(m1sq, lambda);
    let var = g.sub(m2, bias)?;
    Ok(g.sqrt(var))
}

pub fn silog_loss(pred: &Tensor, gt: &Tensor, mask: &Tensor, lambda: f64) -> Result<f64> {
    scalar(|g| {
        let p = g.constant(pred.clone());
        silog_term(g, p, gt, mask, lambda)
    })
}

/// Average pool restricted to valid pixels, then `pooled_mask > 0.5`.
pub fn downsample_mask(mask: &Tensor, s: usize) -> Result<Tensor> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let (oh, ow) = (h / s, w / s);
    let mut out = vec![0.0; oh * ow];
    for (o, cell) in out.iter_mut().enumerate() {
        let (ci, cj) = (o / ow, o % ow);
        let mut sum = 0.0;
        for di in 0..s {
            for dj in 0..s {
                sum += if mask.data()[(ci * s + di) * w + cj * s + dj] != 0.0 { 1.0 } else { 0.0 };
            }
        }
        *cell = if sum / (s * s) as f64 > 0.5 { 1.0 } else { 0.0 };
    }
    Tensor::new(&[oh, ow], out)
}

fn pair_mask(mask: &Tensor, horizontal: bool) -> Result<Tensor> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut out = Vec::new();
    let (rows, cols) = if horizontal { (h, w - 1) } else { (h - 1, w) };
    for i in 0..rows {
        for j in 0..cols {
            let a = mask.data()[i * w + j];
            let b = if horizontal { mask.data()[i * w + j + 1] } else { mask.data()[(i + 1) * w + j] };
            out.push(if a != 0.0 && b != 0.0 { 1.0 } else { 0.0 });
        }
    }
    Tensor::new(&[rows, cols], out)
}

/// Multi-scale log-depth gradient matching. Per scale, depths are
/// mask-aware average pooled, the log residual is differenced forward in
/// `x` and `y`, and mean absolute differences over pairs of valid cells are
/// summed; the result is averaged over scales.
pub fn ms_grad_term(g: &mut Graph, pred: Var, gt: &Tensor, mask: &Tensor, scales: &[usize]) -> Result<Var> {
    check_depths(g.value(pred), gt, mask)?;
    if scales.is_empty() {
        return Err(GepError::Parameter("at least one gradient scale required".into()));
    }
    let (h, w) = (gt.shape()[0], gt.shape()[1]);
    let gt_var = g.constant(gt.clone());
    let mut terms = Vec::with_capacity(scales.len());
    for &s in scales {
        if s == 0 || s > h || s > w || h % s != 0 || w % s != 0 {
            return Err(GepError::Range(format!("scale {s} does not tile the {h}×{w} grid")));
        }
        if h / s < 2 && w / s < 2 {
            return Err(GepError::Range(format!("scale {s} leaves no neighbouring cells")));
        }
        let ms = downsample_mask(mask, s)?;
        let dp = g.masked_avg_pool(pred, mask, s)?;
        let dg = g.masked_avg_pool(gt_var, mask, s)?;
        let lp = g.log(dp);
        let lg = g.log(dg);
        let r = g.sub(lp, lg)?;
        let mut parts = Vec::new();
        if w / s >= 2 {
            let gx = g.diff_x(r)?;
            let ax = g.abs(gx);
            parts.push(g.masked_mean(ax, &pair_mask(&ms, true)?, MASK_EPS)?);
        }
        if h / s >= 2 {
            let gy = g.diff_y(r)?;
            let ay = g.abs(gy);
            parts.push(g.masked_mean(ay, &pair_mask(&ms, false)?, MASK_EPS)?);
        }
        let mut e = parts[0];
        for &p in &parts[1..] {
            e = g.add(e, p)?;
        }
        terms.push(e);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.scale(total, 1.0 / scales.len() as f64))
}

pub fn ms_grad_loss(pred: &Tensor, gt: &Tensor, mask: &Tensor, scales: &[usize]) -> Result<f64> {
    scalar(|g| {
        let p = g.constant(pred.clone());
        ms_grad_term(g, p, gt, mask, scales)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthSupervision {
    pub depth_gt: Tensor,
    pub mask: Tensor,
    pub scales: Vec<usize>,
    pub lambda: f64,
    pub w_silog: f64,
    pub w_ms_grad: f64,
}

impl DepthSupervision {
    /// Defaults: λ = 0.85, scales {1, 2, 4}, weights (1, 0.25).
    pub fn new(depth_gt: Tensor, mask: Tensor) -> Self {
        Self {
            depth_gt,
            mask,
            scales: vec![1, 2, 4],
            lambda: 0.85,
            w_silog: 1.0,
            w_ms_grad: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth_gt.shape() != self.mask.shape() || self.depth_gt.ndim() != 2 {
            return shape_err("depth target and mask must be equal 2-D grids");
        }
        if self.mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(GepError::Parameter("mask must be binary".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) || !(self.w_silog >= 0.0) || !(self.w_ms_grad >= 0.0) {
            return Err(GepError::Parameter("need λ ∈ [0,1] and non-negative weights".into()));
        }
        Ok(())
    }
}

pub fn depth_total_term(g: &mut Graph, pred: Var, sup: &DepthSupervision) -> Result<Var> {
    sup.validate()?;
    let a = silog_term(g, pred, &sup.depth_gt, &sup.mask, sup.lambda)?;
    let b = ms_grad_term(g, pred, &sup.depth_gt, &sup.mask, &sup.scales)?;
    let a = g.scale(a, sup.w_silog);
    let b = g.scale(b, sup.w_ms_grad);
    g.add(a, b)
}

pub fn depth_total(pred: &Tensor, sup: &DepthSupervision) -> Result<f64> {
    scalar(|g| {
        let p = g.constant(pred.clone());
        depth_total_term(g, p, sup)
    })
}

fn scalar(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let v = f(&mut g)?;
    Ok(g.value(v).item().expect("scalar loss"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{evaluate_with_grad, grad_check};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn decode_matches_index_oracle() {
        let mut r = rng(1);
        let (p, c, h, w, d) = (2, 3, 4, 4, 5);
        let f = Tensor::randn(&mut r, &[4, d], 1.0);
        let dec = PatchDecoder::new(Tensor::randn(&mut r, &[d, c * p * p], 1.0), p, c).unwrap();
        let y = linear_patch_decode(&f, &dec, h, w).unwrap();
        let flat = f.matmul(&dec.weight).unwrap();
        for k in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    let token = (yy / p) * (w / p) + xx / p;
                    let col = k * p * p + (yy % p) * p + (xx % p);
                    assert_eq!(y.data()[(k * h + yy) * w + xx], flat.at(token, col));
                }
            }
        }
        let zero = linear_patch_decode(&Tensor::zeros(&[4, d]), &dec, h, w).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(linear_patch_decode(&f.slice_rows(0, 3).unwrap(), &dec, h, w).is_err());
    }

    #[test]
    fn identity_decoder_round_trip() {
        let p = 3;
        let dec = PatchDecoder::new(Tensor::identity(p * p), p, 1).unwrap();
        let f = Tensor::randn(&mut rng(2), &[4, 9], 1.0);
        let y = linear_patch_decode(&f, &dec, 6, 6).unwrap();
        for t in 0..4 {
            for i in 0..9 {
                let (py, px) = (t / 2 * 3 + i / 3, t % 2 * 3 + i % 3);
                assert_eq!(y.data()[py * 6 + px], f.at(t, i));
            }
        }
        assert_eq!(patch_tokens(&y, p).unwrap(), f);
        assert_eq!(dec.invert(&y).unwrap(), f);
    }

    #[test]
    fn invertible_decoder_round_trip() {
        let mut r = rng(3);
        let (p, c) = (2, 2);
        let d = c * p * p;
        let dec = PatchDecoder::new(Tensor::randn(&mut r, &[d, d], 1.0), p, c).unwrap();
        let f = Tensor::randn(&mut r, &[6, d], 1.0);
        let back = dec.invert(&linear_patch_decode(&f, &dec, 4, 6).unwrap()).unwrap();
        assert!(back.max_abs_diff(&f) < 1e-10);
    }

    fn ce_oracle(logits: &Tensor, labels: &[u32]) -> f64 {
        let (c, n) = (logits.shape()[0], labels.len());
        let mut s = 0.0;
        for p in 0..n {
            let z: Vec<f64> = (0..c).map(|k| logits.data()[k * n + p]).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            s += lse - z[labels[p] as usize];
        }
        s / n as f64
    }

    fn dice_oracle(logits: &Tensor, labels: &[u32]) -> f64 {
        let (c, n) = (logits.shape()[0], labels.len());
        let mut total = 0.0;
        for k in 0..c {
            let (mut inter, mut ps, mut gs) = (0.0, 0.0, 0.0);
            for p in 0..n {
                let z: Vec<f64> = (0..c).map(|j| logits.data()[j * n + p]).collect();
                let den: f64 = z.iter().map(|v| v.exp()).sum();
                let pr = z[k].exp() / den;
                let gt = if labels[p] as usize == k { 1.0 } else { 0.0 };
                inter += pr * gt;
                ps += pr;
                gs += gt;
            }
            total += 1.0 - (2.0 * inter + 1.0) / (ps + gs + 1.0);
        }
        total / c as f64
    }

    #[test]
    fn seg_loss_values() {
        let mut r = rng(4);
        let logits = Tensor::randn(&mut r, &[3, 4, 5], 1.0);
        let labels: Vec<u32> = (0..20).map(|_| r.random_range(0..3)).collect();
        let expect = 0.5 * ce_oracle(&logits, &labels) + 0.5 * dice_oracle(&logits, &labels);
        assert!((seg_loss(&logits, &labels, None).unwrap() - expect).abs() < 1e-12);

        let uniform = Tensor::zeros(&[2, 2, 2]);
        let balanced = [0, 1, 0, 1];
        let ce = 2.0 * seg_loss(&uniform, &balanced, None).unwrap() - dice_oracle(&uniform, &balanced);
        assert!((ce - 2f64.ln()).abs() < 1e-12);

        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let mut l = Tensor::zeros(&[2, 2, 2]);
            for (p, &lab) in balanced.iter().enumerate() {
                l.data_mut()[lab as usize * 4 + p] = margin;
            }
            let v = seg_loss(&l, &balanced, None).unwrap();
            assert!(v < prev);
            prev = v;
        }
        // both terms vanish once the softmax saturates
        assert!(prev < 1e-12);
        assert!(matches!(
            seg_loss(&logits, &[5; 20], None),
            Err(GepError::InvalidLabel { label: 5, classes: 3 })
        ));
    }

    #[test]
    fn seg_loss_ignore_index() {
        let mut r = rng(5);
        let logits = Tensor::randn(&mut r, &[3, 2, 3], 1.0);
        let labels = [0, 255, 2, 1, 255, 0];
        let kept: Vec<usize> = vec![0, 2, 3, 5];
        let sub = Tensor::new(
            &[3, 1, 4],
            (0..3).flat_map(|k| kept.iter().map(move |&p| (k, p))).map(|(k, p)| logits.data()[k * 6 + p]).collect(),
        )
        .unwrap();
        let sub_labels: Vec<u32> = kept.iter().map(|&p| labels[p]).collect();
        let a = seg_loss(&logits, &labels, Some(255)).unwrap();
        let b = seg_loss(&sub, &sub_labels, None).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn seg_loss_relabel_equivariance() {
        let mut r = rng(6);
        let logits = Tensor::randn(&mut r, &[3, 3, 3], 1.0);
        let labels: Vec<u32> = (0..9).map(|_| r.random_range(0..3)).collect();
        let perm = [2usize, 0, 1];
        let mut pl = Tensor::zeros(&[3, 3, 3]);
        for k in 0..3 {
            for p in 0..9 {
                pl.data_mut()[perm[k] * 9 + p] = logits.data()[k * 9 + p];
            }
        }
        let plab: Vec<u32> = labels.iter().map(|&l| perm[l as usize] as u32).collect();
        let a = seg_loss(&logits, &labels, None).unwrap();
        let b = seg_loss(&pl, &plab, None).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn denorm_endpoints_and_inverse() {
        let r = DepthRange::new(1.0, 2f64.exp()).unwrap();
        let y = Tensor::vector(vec![0.0, 0.5, 1.0, -3.0, 7.0]);
        let d = denorm_log_depth(&y, &r);
        assert_eq!(d.data()[0], 1.0);
        assert_eq!(d.data()[2], 2f64.exp());
        assert!((d.data()[1] - 1f64.exp()).abs() < 1e-12);
        assert_eq!(d.data()[3], 1.0);
        assert_eq!(d.data()[4], 2f64.exp());
        let r2 = DepthRange::new(0.5, 80.0).unwrap();
        let ys = Tensor::uniform(&mut rng(7), &[50], 0.0, 1.0);
        let back = log_normalize_depth(&denorm_log_depth(&ys, &r2), &r2);
        assert!(back.max_abs_diff(&ys) < 1e-12);
        assert!(DepthRange::new(2.0, 1.0).is_err());
    }

    #[test]
    fn masked_mean_values() {
        let x = Tensor::vector(vec![2.0, 100.0, 4.0]);
        assert_eq!(masked_mean(&x, &Tensor::vector(vec![1.0, 0.0, 1.0]), 0.0).unwrap(), 3.0);
        assert_eq!(masked_mean(&x, &Tensor::zeros(&[3]), MASK_EPS).unwrap(), 0.0);
        let full = masked_mean(&x, &Tensor::filled(&[3], 1.0), MASK_EPS).unwrap();
        let mean = 106.0 / 3.0;
        assert!((full - mean).abs() < MASK_EPS * mean);
    }

    fn depth_case(seed: u64, h: usize, w: usize) -> (Tensor, Tensor, Tensor) {
        let mut r = rng(seed);
        let pred = Tensor::uniform(&mut r, &[h, w], 0.5, 10.0);
        let gt = Tensor::uniform(&mut r, &[h, w], 0.5, 10.0);
        let mask = Tensor::new(&[h, w], (0..h * w).map(|_| if r.random_bool(0.8) { 1.0 } else { 0.0 }).collect()).unwrap();
        (pred, gt, mask)
    }

    #[test]
    fn silog_closed_forms() {
        let (_, gt, mask) = depth_case(8, 8, 8);
        assert!(silog_loss(&gt, &gt, &mask, 0.85).unwrap().abs() < 1e-12);
        let scaled = gt.map(|d| d * 1f64.exp());
        let v = silog_loss(&scaled, &gt, &mask, 0.85).unwrap();
        assert!((v - 0.15f64.sqrt()).abs() < 1e-9, "{v}");
        for c in [0.3, 2.0, 17.0] {
            let s = gt.map(|d| d * c);
            assert!(silog_loss(&s, &gt, &mask, 1.0).unwrap() < 1e-7);
        }
        let mut bad = gt.clone();
        let valid = mask.data().iter().position(|&m| m == 1.0).unwrap();
        bad.data_mut()[valid] = 0.0;
        assert!(matches!(silog_loss(&bad, &gt, &mask, 0.85), Err(GepError::Domain(_))));
        let invalid = mask.data().iter().position(|&m| m == 0.0).unwrap();
        let mut ok = gt.clone();
        ok.data_mut()[invalid] = -1.0;
        assert!(silog_loss(&ok, &gt, &mask, 0.85).is_ok());
    }

    #[test]
    fn silog_full_scale_invariance() {
        let (pred, gt, mask) = depth_case(9, 6, 6);
        let base = silog_loss(&pred, &gt, &mask, 1.0).unwrap();
        for c in [0.01, 0.5, 3.0, 1000.0] {
            let v = silog_loss(&pred.map(|d| d * c), &gt, &mask, 1.0).unwrap();
            assert!((v - base).abs() < 1e-10);
        }
    }

    #[test]
    fn ms_grad_hand_case() {
        let pred = Tensor::from_rows(&[vec![1.0, 2.0], vec![4.0, 1.0]]).unwrap();
        let gt = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let mask = Tensor::filled(&[2, 2], 1.0);
        let l2 = 2f64.ln();
        // residual = log pred; x diffs: ln2, −ln4; y diffs: ln4, −ln2
        let ex = (l2 + 2.0 * l2) / (2.0 + MASK_EPS);
        let ey = (2.0 * l2 + l2) / (2.0 + MASK_EPS);
        let v = ms_grad_loss(&pred, &gt, &mask, &[1]).unwrap();
        assert!((v - (ex + ey)).abs() < 1e-12);
        assert!(ms_grad_loss(&pred, &gt, &mask, &[4]).is_err());
    }

    #[test]
    fn ms_grad_invariances() {
        let (pred, gt, mask) = depth_case(10, 8, 8);
        let base = ms_grad_loss(&pred, &gt, &mask, &[1, 2, 4]).unwrap();
        let shifted = ms_grad_loss(&pred.map(|d| d * 7.5), &gt, &mask, &[1, 2, 4]).unwrap();
        assert!((base - shifted).abs() < 1e-12);
        assert!(ms_grad_loss(&gt.map(|d| d * 3.0), &gt, &mask, &[1, 2, 4]).unwrap() < 1e-12);
        let mut changed = pred.clone();
        for (i, &m) in mask.data().iter().enumerate() {
            if m == 0.0 {
                changed.data_mut()[i] = 1234.5;
            }
        }
        assert_eq!(ms_grad_loss(&changed, &gt, &mask, &[1, 2, 4]).unwrap(), base);
    }

    #[test]
    fn depth_total_components() {
        let (pred, gt, mask) = depth_case(11, 8, 8);
        let mut sup = DepthSupervision::new(gt.clone(), mask.clone());
        assert!(depth_total(&gt, &sup).unwrap().abs() < 1e-12);
        let expect = silog_loss(&pred, &gt, &mask, 0.85).unwrap() + 0.25 * ms_grad_loss(&pred, &gt, &mask, &[1, 2, 4]).unwrap();
        assert!((depth_total(&pred, &sup).unwrap() - expect).abs() < 1e-12);
        sup.w_ms_grad = 0.0;
        assert_eq!(depth_total(&pred, &sup).unwrap(), silog_loss(&pred, &gt, &mask, 0.85).unwrap());
    }

    #[test]
    fn masked_pixels_get_zero_gradient() {
        let (pred, gt, mask) = depth_case(12, 8, 8);
        let sup = DepthSupervision::new(gt, mask.clone());
        let (_, grads) = evaluate_with_grad(|g: &mut Graph, v: &[Var]| depth_total_term(g, v[0], &sup), &[pred]).unwrap();
        for (gv, &m) in grads[0].data().iter().zip(mask.data()) {
            if m == 0.0 {
                assert_eq!(*gv, 0.0);
            }
        }
        assert!(grads[0].data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn losses_pass_grad_check() {
        for seed in 0..5 {
            let (pred, gt, mask) = depth_case(20 + seed, 8, 8);
            let sup = DepthSupervision::new(gt.clone(), mask.clone());
            let cases: Vec<Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var> + Sync>> = vec![
                Box::new(|g, v| silog_term(g, v[0], &gt, &mask, 0.85)),
                Box::new(|g, v| ms_grad_term(g, v[0], &gt, &mask, &[1, 2, 4])),
                Box::new(|g, v| depth_total_term(g, v[0], &sup)),
            ];
            for f in &cases {
                let r = grad_check(|g: &mut Graph, v: &[Var]| f(g, v), std::slice::from_ref(&pred), 1e-4).unwrap();
                assert!(r.passed(), "seed {seed}: {r:?}");
            }
            let mut r = rng(30 + seed);
            let logits = Tensor::randn(&mut r, &[3, 4, 4], 1.0);
            let labels: Vec<u32> = (0..16).map(|_| r.random_range(0..3)).collect();
            let rep = grad_check(|g: &mut Graph, v: &[Var]| seg_loss_term(g, v[0], &labels, None), &[logits], 1e-4).unwrap();
            assert!(rep.passed(), "{rep:?}");
        }
    }
}
