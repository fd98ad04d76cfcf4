//! Alignment objectives between an event encoder and a frozen image teacher.
//!
//! Every loss detaches the teacher embeddings before use, so gradients only
//! reach the event-side inputs and the projection head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, GepError, Result};
use crate::tensor::{evaluate, Graph, Tensor, Var};

/// Loss weights and InfoNCE temperature; all strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignWeights {
    pub lambda_cos: f64,
    pub lambda_nce: f64,
    pub mu: f64,
    pub tau: f64,
}

impl Default for AlignWeights {
    fn default() -> Self {
        Self {
            lambda_cos: 1.0,
            lambda_nce: 1.0,
            mu: 1.0,
            tau: 0.07,
        }
    }
}

impl AlignWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cos", self.lambda_cos),
            ("lambda_nce", self.lambda_nce),
            ("mu", self.mu),
            ("tau", self.tau),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(GepError::Parameter(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Embeddings of one alignment batch, each `N×D`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignBatch {
    pub z_e: Tensor,
    /// Teacher embeddings; never differentiated.
    pub z_i: Tensor,
    /// Event encoder applied to the image inputs.
    pub z_e_on_image: Tensor,
}

impl AlignBatch {
    pub fn validate(&self) -> Result<()> {
        let s = self.z_e.shape();
        if s.len() != 2 || self.z_i.shape() != s || self.z_e_on_image.shape() != s {
            return shape_err(format!(
                "alignment batch shapes {:?} / {:?} / {:?}",
                s,
                self.z_i.shape(),
                self.z_e_on_image.shape()
            ));
        }
        Ok(())
    }
}

/// Contrastive projection `affine → GELU → affine`, or the identity.
#[derive(Debug, Clone, PartialEq)]
pub enum ProjectionHead {
    Identity,
    Mlp {
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    },
}

/// A [`ProjectionHead`] recorded on a graph.
#[derive(Debug, Clone, Copy)]
pub enum HeadVars {
    Identity,
    Mlp { w1: Var, b1: Var, w2: Var, b2: Var },
}

impl ProjectionHead {
    pub fn mlp<R: Rng + ?Sized>(rng: &mut R, dim: usize, hidden: usize) -> Self {
        ProjectionHead::Mlp {
            w1: Tensor::randn(rng, &[dim, hidden], (1.0 / dim as f64).sqrt()),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::randn(rng, &[hidden, dim], (1.0 / hidden as f64).sqrt()),
            b2: Tensor::zeros(&[dim]),
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        match self {
            ProjectionHead::Identity => vec![],
            ProjectionHead::Mlp { w1, b1, w2, b2 } => {
                vec![w1.clone(), b1.clone(), w2.clone(), b2.clone()]
            }
        }
    }

    pub fn set_params(&mut self, params: &[Tensor]) {
        if let ProjectionHead::Mlp { w1, b1, w2, b2 } = self {
            *w1 = params[0].clone();
            *b1 = params[1].clone();
            *w2 = params[2].clone();
            *b2 = params[3].clone();
        }
    }

    /// Records the head's parameters as constants.
    pub fn bind_const(&self, g: &mut Graph) -> HeadVars {
        match self {
            ProjectionHead::Identity => HeadVars::Identity,
            ProjectionHead::Mlp { w1, b1, w2, b2 } => HeadVars::Mlp {
                w1: g.constant(w1.clone()),
                b1: g.constant(b1.clone()),
                w2: g.constant(w2.clone()),
                b2: g.constant(b2.clone()),
            },
        }
    }

    /// Builds head vars from already-recorded parameter leaves (in
    /// [`ProjectionHead::params`] order).
    pub fn bind_vars(&self, vars: &[Var]) -> HeadVars {
        match self {
            ProjectionHead::Identity => HeadVars::Identity,
            ProjectionHead::Mlp { .. } => HeadVars::Mlp {
                w1: vars[0],
                b1: vars[1],
                w2: vars[2],
                b2: vars[3],
            },
        }
    }
}

impl HeadVars {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match *self {
            HeadVars::Identity => Ok(x),
            HeadVars::Mlp { w1, b1, w2, b2 } => {
                let h = g.matmul(x, w1)?;
                let h = g.add_row(h, b1)?;
                let h = g.gelu(h);
                let o = g.matmul(h, w2)?;
                g.add_row(o, b2)
            }
        }
    }
}

fn check_pair(g: &Graph, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 2 || sa != sb {
        return shape_err(format!("embedding pair {sa:?} vs {sb:?}"));
    }
    if sa[0] == 0 {
        return shape_err("empty batch");
    }
    Ok(())
}

fn check_nonzero_rows(g: &Graph, v: Var, what: &str) -> Result<()> {
    let t = g.value(v);
    for r in 0..t.rows() {
        if t.row(r).iter().all(|&x| x == 0.0) {
            return Err(GepError::Singularity(format!("{what} row {r} is zero")));
        }
    }
    Ok(())
}

/// `mean_n (1 − cos(z_eⁿ, sg(z_iⁿ)))`.
pub fn cosine_align_term(g: &mut Graph, z_e: Var, z_i: Var) -> Result<Var> {
    check_pair(g, z_e, z_i)?;
    check_nonzero_rows(g, z_e, "event embedding")?;
    check_nonzero_rows(g, z_i, "teacher embedding")?;
    let teacher = g.detach(z_i);
    let cos = g.cosine_rows(z_e, teacher)?;
    let m = g.mean(cos);
    let neg = g.scale(m, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// In-batch InfoNCE with image embeddings as the only negatives. Both streams
/// pass through the projection head before ℓ2 normalization.
pub fn info_nce_term(g: &mut Graph, z_e: Var, z_i: Var, tau: f64, head: &HeadVars) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(GepError::Parameter(format!("temperature must be > 0, got {tau}")));
    }
    check_pair(g, z_e, z_i)?;
    let n = g.shape(z_e)[0];
    let teacher = g.detach(z_i);
    let pe = head.apply(g, z_e)?;
    let pi = head.apply(g, teacher)?;
    let ne = g.l2_normalize_rows(pe);
    let ni = g.l2_normalize_rows(pi);
    let nit = g.transpose(ni)?;
    let sims = g.matmul(ne, nit)?;
    let logits = g.scale(sims, 1.0 / tau);
    let logp = g.log_softmax(logits);
    let eye = g.constant(Tensor::identity(n));
    let diag = g.mul(logp, eye)?;
    let s = g.sum(diag);
    Ok(g.scale(s, -1.0 / n as f64))
}

/// `μ · mean_n (1 − cos(E_e(X_i)ⁿ, sg(z_iⁿ)))`.
pub fn preservation_term(g: &mut Graph, z_e_on_image: Var, z_i: Var, mu: f64) -> Result<Var> {
    let c = cosine_align_term(g, z_e_on_image, z_i)?;
    Ok(g.scale(c, mu))
}

/// `λ_cos·L_cos + λ_nce·L_nce + L_p`.
pub fn total_alignment_term(
    g: &mut Graph,
    z_e: Var,
    z_i: Var,
    z_e_on_image: Var,
    w: &AlignWeights,
    head: &HeadVars,
) -> Result<Var> {
    let cos = cosine_align_term(g, z_e, z_i)?;
    let nce = info_nce_term(g, z_e, z_i, w.tau, head)?;
    let pres = preservation_term(g, z_e_on_image, z_i, w.mu)?;
    let a = g.scale(cos, w.lambda_cos);
    let b = g.scale(nce, w.lambda_nce);
    let ab = g.add(a, b)?;
    g.add(ab, pres)
}

pub fn cosine_align_loss(z_e: &Tensor, z_i: &Tensor) -> Result<f64> {
    evaluate(&|g: &mut Graph, v: &[Var]| cosine_align_term(g, v[0], v[1]), &[z_e.clone(), z_i.clone()])
}

pub fn info_nce(z_e: &Tensor, z_i: &Tensor, tau: f64, head: &ProjectionHead) -> Result<f64> {
    evaluate(
        &|g: &mut Graph, v: &[Var]| {
            let h = head.bind_const(g);
            info_nce_term(g, v[0], v[1], tau, &h)
        },
        &[z_e.clone(), z_i.clone()],
    )
}

pub fn preservation_loss(z_e_on_image: &Tensor, z_i: &Tensor, mu: f64) -> Result<f64> {
    evaluate(
        &|g: &mut Graph, v: &[Var]| preservation_term(g, v[0], v[1], mu),
        &[z_e_on_image.clone(), z_i.clone()],
    )
}

pub fn total_alignment_loss(batch: &AlignBatch, w: &AlignWeights, head: &ProjectionHead) -> Result<f64> {
    w.validate()?;
    batch.validate()?;
    evaluate(
        &|g: &mut Graph, v: &[Var]| {
            let h = head.bind_const(g);
            total_alignment_term(g, v[0], v[1], v[2], w, &h)
        },
        &[batch.z_e.clone(), batch.z_i.clone(), batch.z_e_on_image.clone()],
    )
}
