use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fmt_f;
use crate::align::{cosine_align_term, info_nce_term, preservation_term, total_alignment_term, AlignWeights, ProjectionHead};
use crate::config::RunConfig;
use crate::error::{GepError, Result};
use crate::heads::{depth_total_term, ms_grad_term, seg_loss_term, silog_term, DepthSupervision};
use crate::lm::pretrain_loss_term;
use crate::metrics::Report;
use crate::tensor::{grad_check, GradReport, Graph, Tensor, Var};

type Objective<'a> = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var> + Sync + 'a>;

/// Every training loss at seeded random inputs. Teacher embeddings and depth
/// targets enter as constants; everything upstream of them is an input.
pub fn gradient_suite(seed: u64, rel_tol: f64) -> Result<Vec<(&'static str, GradReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (4, 8);
    let ze = Tensor::randn(&mut rng, &[n, d], 1.0);
    let zi = Tensor::randn(&mut rng, &[n, d], 1.0);
    let ze_img = Tensor::randn(&mut rng, &[n, d], 1.0);
    let head = ProjectionHead::mlp(&mut rng, d, d);
    let weights = AlignWeights {
        lambda_cos: rng.random_range(0.5..2.0),
        lambda_nce: rng.random_range(0.5..2.0),
        mu: rng.random_range(0.5..2.0),
        tau: rng.random_range(0.1..1.0),
    };
    let preds = Tensor::randn(&mut rng, &[6, d], 1.0);
    let targets = Tensor::randn(&mut rng, &[6, d], 1.0);

    let (h, w) = (8, 8);
    let pred = Tensor::uniform(&mut rng, &[h, w], 0.5, 10.0);
    let gt = Tensor::uniform(&mut rng, &[h, w], 0.5, 10.0);
    let mask = Tensor::new(&[h, w], (0..h * w).map(|_| if rng.random_bool(0.8) { 1.0 } else { 0.0 }).collect())?;
    let sup = DepthSupervision::new(gt.clone(), mask.clone());
    let logits = Tensor::randn(&mut rng, &[3, 4, 4], 1.0);
    let labels: Vec<u32> = (0..16).map(|_| rng.random_range(0..3)).collect();

    let mut with_head = vec![ze.clone()];
    with_head.extend(head.params());
    let mut total_inputs = vec![ze.clone(), ze_img.clone()];
    total_inputs.extend(head.params());

    let cases: Vec<(&'static str, Objective, Vec<Tensor>)> = vec![
        (
            "cosine_align",
            Box::new(|g, v| {
                let t = g.constant(zi.clone());
                cosine_align_term(g, v[0], t)
            }),
            vec![ze.clone()],
        ),
        (
            "info_nce",
            Box::new(|g, v| {
                let hv = head.bind_vars(&v[1..]);
                let t = g.constant(zi.clone());
                info_nce_term(g, v[0], t, weights.tau, &hv)
            }),
            with_head,
        ),
        (
            "preservation",
            Box::new(|g, v| {
                let t = g.constant(zi.clone());
                preservation_term(g, v[0], t, weights.mu)
            }),
            vec![ze_img.clone()],
        ),
        (
            "total_alignment",
            Box::new(|g, v| {
                let hv = head.bind_vars(&v[2..]);
                let t = g.constant(zi.clone());
                total_alignment_term(g, v[0], t, v[1], &weights, &hv)
            }),
            total_inputs,
        ),
        (
            "pretrain_mse",
            Box::new(|g, v| {
                let t = g.constant(targets.clone());
                pretrain_loss_term(g, v[0], t)
            }),
            vec![preds.clone()],
        ),
        ("silog", Box::new(|g, v| silog_term(g, v[0], &gt, &mask, sup.lambda)), vec![pred.clone()]),
        ("ms_grad", Box::new(|g, v| ms_grad_term(g, v[0], &gt, &mask, &sup.scales)), vec![pred.clone()]),
        ("seg_ce_dice", Box::new(|g, v| seg_loss_term(g, v[0], &labels, None)), vec![logits.clone()]),
        ("depth_total", Box::new(|g, v| depth_total_term(g, v[0], &sup)), vec![pred.clone()]),
    ];
    cases
        .into_iter()
        .map(|(name, f, inputs)| Ok((name, grad_check(|g: &mut Graph, v: &[Var]| f(g, v), &inputs, rel_tol)?)))
        .collect()
}

pub(super) fn run(cfg: &RunConfig, report: &mut Report) -> Result<()> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    let mut failures = Vec::new();
    for s in 0..cfg.gradcheck_seeds {
        for (name, r) in gradient_suite(cfg.seed.wrapping_add(s), cfg.gradcheck_tol)? {
            match worst.iter_mut().find(|(n, _)| *n == name) {
                Some(e) => e.1 = e.1.max(r.max_rel_error),
                None => worst.push((name, r.max_rel_error)),
            }
            if !r.passed() {
                failures.push(format!("{name}@{}", cfg.seed.wrapping_add(s)));
            }
        }
    }
    report.push("seeds", cfg.gradcheck_seeds);
    report.push("rel_tol", fmt_f(cfg.gradcheck_tol));
    for (name, e) in &worst {
        report.push(format!("{name}.max_rel_error"), fmt_f(*e));
        report.push(format!("{name}.pass"), *e < cfg.gradcheck_tol);
    }
    report.push("all_pass", failures.is_empty());
    if failures.is_empty() {
        Ok(())
    } else {
        Err(GepError::Contract(format!("gradient check failed for {}", failures.join(", "))))
    }
}
