use super::{Graph, Tensor, Var};
use crate::error::{GepError, Result};
use crate::par::{self, Exec};

/// Denominator floor for relative errors: coordinates whose analytic and
/// numeric gradients are both below this magnitude are compared on an
/// absolute scale of `REL_ERROR_FLOOR`.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

fn scalar_of(g: &Graph, out: Var) -> Result<f64> {
    g.value(out).item().ok_or_else(|| {
        GepError::Contract(format!(
            "objective must be scalar, got shape {:?}",
            g.shape(out)
        ))
    })
}

/// Value of `f` at `inputs` without a reverse pass.
pub fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)
}

/// Value and exact reverse-mode gradient of a scalar objective with
/// respect to every input.
pub fn evaluate_with_grad<F>(f: F, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let value = scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    Ok((value, vars.iter().map(|&v| grads.get(&g, v)).collect()))
}

/// Central-difference gradient estimate.
pub fn finite_diff_grad<F>(f: F, inputs: &[Tensor], epsilon: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync,
{
    finite_diff_grad_with(Exec::default(), f, inputs, epsilon)
}

pub fn finite_diff_grad_with<F>(
    exec: Exec,
    f: F,
    inputs: &[Tensor],
    epsilon: f64,
) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync,
{
    if !(epsilon > 0.0) {
        return Err(GepError::Parameter(format!("epsilon must be > 0, got {epsilon}")));
    }
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(t, x)| (0..x.len()).map(move |k| (t, k)))
        .collect();
    let diffs = par::try_map_range(exec, coords.len(), |c| {
        let (t, k) = coords[c];
        let mut probe = inputs.to_vec();
        let x0 = probe[t].data()[k];
        probe[t].data_mut()[k] = x0 + epsilon;
        let up = evaluate(&f, &probe)?;
        probe[t].data_mut()[k] = x0 - epsilon;
        let down = evaluate(&f, &probe)?;
        Ok::<f64, GepError>((up - down) / (2.0 * epsilon))
    })?;
    let mut out: Vec<Tensor> = inputs.iter().map(|x| Tensor::zeros(x.shape())).collect();
    for (&(t, k), d) in coords.iter().zip(diffs) {
        out[t].data_mut()[k] = d;
    }
    Ok(out)
}

/// Outcome of comparing reverse-mode gradients with finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst coordinate for each input (by relative error).
    pub worst_index: Vec<usize>,
    pub rel_tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.rel_tol
    }
}

pub fn grad_check<F>(f: F, inputs: &[Tensor], rel_tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync,
{
    grad_check_with(Exec::default(), f, inputs, rel_tol, 1e-6)
}

pub fn grad_check_with<F>(
    exec: Exec,
    f: F,
    inputs: &[Tensor],
    rel_tol: f64,
    epsilon: f64,
) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync,
{
    if !(rel_tol > 0.0) {
        return Err(GepError::Parameter(format!("rel_tol must be > 0, got {rel_tol}")));
    }
    let (_, analytic) = evaluate_with_grad(&f, inputs)?;
    let numeric = finite_diff_grad_with(exec, &f, inputs, epsilon)?;
    let mut report = GradReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: Vec::with_capacity(inputs.len()),
        rel_tol,
    };
    for (a, n) in analytic.iter().zip(&numeric) {
        let mut worst = (0usize, -1.0f64);
        for (k, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let abs = (av - nv).abs();
            let rel = abs / av.abs().max(nv.abs()).max(REL_ERROR_FLOOR);
            let rel = if rel.is_nan() { f64::INFINITY } else { rel };
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > worst.1 {
                worst = (k, rel);
            }
        }
        report.worst_index.push(worst.0);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_central_difference_is_exact() {
        let f = |g: &mut Graph, v: &[Var]| Ok(g.square(v[0]));
        let d = finite_diff_grad(f, &[Tensor::scalar(3.0)], 1e-5).unwrap();
        assert!((d[0].data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let f = |g: &mut Graph, _: &[Var]| Ok(g.constant(Tensor::scalar(4.2)));
        let d = finite_diff_grad(f, &[Tensor::vector(vec![1.0, 2.0])], 1e-6).unwrap();
        assert_eq!(d[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_epsilon_and_tolerance() {
        let f = |g: &mut Graph, v: &[Var]| Ok(g.sum(v[0]));
        assert!(finite_diff_grad(f, &[Tensor::scalar(1.0)], 0.0).is_err());
        assert!(grad_check(f, &[Tensor::scalar(1.0)], -1.0).is_err());
    }

    #[test]
    fn softmax_cross_entropy_matches_analytic() {
        // CE of row-softmax against fixed one-hot targets: grad = (p - y) / rows.
        let x = Tensor::new(&[2, 3], vec![0.3, -1.2, 2.0, 0.0, 0.7, -0.4]).unwrap();
        let y = Tensor::new(&[2, 3], vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let yc = y.clone();
        let f = move |g: &mut Graph, v: &[Var]| {
            let p = g.row_softmax(v[0]);
            let lp = g.log(p);
            let t = g.constant(yc.clone());
            let prod = g.mul(lp, t)?;
            let s = g.sum(prod);
            Ok(g.scale(s, -0.5))
        };
        let num = finite_diff_grad(f, std::slice::from_ref(&x), 1e-6).unwrap();
        for r in 0..2 {
            let row = x.row(r);
            let m = row.iter().copied().fold(f64::MIN, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for c in 0..3 {
                let p = (row[c] - m).exp() / z;
                let expect = (p - y.at(r, c)) / 2.0;
                assert!((num[0].at(r, c) - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cosine_of_identical_vectors() {
        let x = Tensor::new(&[1, 4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let f = |g: &mut Graph, v: &[Var]| {
            let y = g.detach(v[0]);
            let c = g.cosine_rows(v[0], y)?;
            Ok(g.sum(c))
        };
        let (value, grads) = evaluate_with_grad(f, std::slice::from_ref(&x)).unwrap();
        assert!((value - 1.0).abs() < 1e-15);
        let dot: f64 = grads[0].data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-12);
        let num = finite_diff_grad(f, &[x], 1e-6).unwrap();
        assert!(num[0].max_abs_diff(&grads[0]) < 1e-8);
    }

    fn primitives() -> Vec<(&'static str, fn(&mut Graph, &[Var]) -> Result<Var>)> {
        vec![
            ("add", |g, v| {
                let s = g.add(v[0], v[1])?;
                let q = g.square(s);
                Ok(g.sum(q))
            }),
            ("sub_mul", |g, v| {
                let s = g.sub(v[0], v[1])?;
                let p = g.mul(s, v[0])?;
                Ok(g.sum(p))
            }),
            ("div", |g, v| {
                let b = g.exp(v[1]);
                let d = g.div(v[0], b)?;
                Ok(g.sum(d))
            }),
            ("matmul", |g, v| {
                let t = g.transpose(v[1])?;
                let m = g.matmul(v[0], t)?;
                let q = g.tanh(m);
                Ok(g.sum(q))
            }),
            ("row_softmax", |g, v| {
                let p = g.row_softmax(v[0]);
                let w = g.mul(p, v[1])?;
                Ok(g.sum(w))
            }),
            ("log_softmax", |g, v| {
                let p = g.log_softmax(v[0]);
                let w = g.mul(p, v[1])?;
                Ok(g.sum(w))
            }),
            ("l2_normalize", |g, v| {
                let n = g.l2_normalize_rows(v[0]);
                let w = g.mul(n, v[1])?;
                Ok(g.sum(w))
            }),
            ("exp_log_sqrt", |g, v| {
                let e = g.exp(v[0]);
                let l = g.log(e);
                let q = g.square(l);
                let a = g.add_scalar(q, 1.0);
                let s = g.sqrt(a);
                Ok(g.mean(s))
            }),
            ("cosine", |g, v| {
                let c = g.cosine_rows(v[0], v[1])?;
                Ok(g.mean(c))
            }),
            ("masked_mean", |g, v| {
                let m = Tensor::new(&[3, 4], (0..12).map(|i| (i % 3 != 0) as u8 as f64).collect())?;
                let sq = g.square(v[0]);
                g.masked_mean(sq, &m, 1e-8)
            }),
            ("layer_norm_gelu", |g, v| {
                let n = g.layer_norm(v[0], 1e-5);
                let a = g.gelu(n);
                let w = g.mul(a, v[1])?;
                Ok(g.sum(w))
            }),
            ("row_ops", |g, v| {
                let w = g.slice_cols(v[1], 0, 4)?;
                let row = g.gather(w, vec![4, 5, 6, 7], &[4])?;
                let x = g.mul_row(v[0], row)?;
                let y = g.add_row(x, row)?;
                let z = g.sigmoid(y);
                Ok(g.sum(z))
            }),
            ("concat_group", |g, v| {
                let c = g.concat_cols(&[v[0], v[1]])?;
                let m = g.group_mean_rows(c, 3)?;
                let q = g.square(m);
                Ok(g.sum(q))
            }),
            ("causal_softmax", |g, v| {
                let t = g.transpose(v[1])?;
                let s = g.matmul(v[0], t)?;
                let p = g.causal_softmax(s)?;
                let q = g.matmul(p, v[1])?;
                let a = g.abs(q);
                Ok(g.sum(a))
            }),
            ("pool_diff", |g, v| {
                let x = g.reshape(v[0], &[4, 3])?;
                let e = g.exp(x);
                let m = Tensor::new(&[4, 3], vec![1., 1., 0., 1., 0., 1., 1., 1., 1., 0., 1., 1.])?;
                let f = g.mask_fill(e, &m, 1.0)?;
                let dx = g.diff_x(f)?;
                let dy = g.diff_y(f)?;
                let sx = g.square(dx);
                let sy = g.square(dy);
                let a = g.sum(sx);
                let b = g.sum(sy);
                let m2 = Tensor::new(&[2, 6], vec![1., 0., 1., 1., 0., 0., 1., 1., 0., 1., 0., 1.])?;
                let y = g.reshape(v[1], &[2, 6])?;
                let p = g.masked_avg_pool(y, &m2, 2)?;
                let pp = g.square(p);
                let c = g.sum(pp);
                let ab = g.add(a, b)?;
                g.add(ab, c)
            }),
        ]
    }

    #[test]
    fn every_primitive_passes_grad_check() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::randn(&mut rng, &[3, 4], 1.0);
            let b = Tensor::randn(&mut rng, &[3, 4], 1.0);
            for (name, f) in primitives() {
                let r = grad_check_with(Exec::Sequential, f, &[a.clone(), b.clone()], 1e-4, 1e-6)
                    .unwrap();
                assert!(r.passed(), "{name} seed {seed}: {r:?}");
            }
        }
    }

    #[test]
    fn corrupted_rule_is_caught() {
        fn cube(x: f64) -> f64 {
            x * x * x
        }
        fn wrong(x: f64) -> f64 {
            3.0 * x * x + x * x * x
        }
        let f = |g: &mut Graph, v: &[Var]| {
            let c = g.map_custom(v[0], cube, wrong);
            Ok(g.sum(c))
        };
        let x = Tensor::vector(vec![0.1, 0.2, 3.0, 0.4]);
        let r = grad_check(f, &[x], 1e-4).unwrap();
        assert!(!r.passed());
        assert_eq!(r.worst_index, vec![2]);
    }
}
