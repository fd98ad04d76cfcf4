//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use gep::align::{
    cosine_align_term, info_nce, info_nce_term, preservation_term, total_alignment_term, AlignWeights, ProjectionHead,
};
use gep::config::RunConfig;
use gep::events::{normalize, RawCounts, Resolution, TimeWindow, CH_B, CH_MASK, CH_R};
use gep::heads::{
    denorm_log_depth, depth_total_term, linear_patch_decode, ms_grad_term, silog_loss, silog_term, DepthRange,
    DepthSupervision, PatchDecoder,
};
use gep::lm::{self, rollout, RolloutSpec, TrainSpec, Transformer, TransformerConfig};
use gep::metrics::{cluster_metrics, depth_errors, miou_macc, topk_accuracy, ConfusionMatrix};
use gep::pipeline::{gradient_suite, run_all, run_stage, Stage};
use gep::seq::{interleave, Modality, TokenSequence};
use gep::tensor::{evaluate_with_grad, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    ensure(start.elapsed() < limit, || format!("took {:.1?}, limit {limit:?}", start.elapsed()))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn sorted_nearest_rank(values: &[u32], n: u32) -> u32 {
    let mut v = values.to_vec();
    v.sort();
    let rank = ((n as f64 / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.max(1) - 1]
}

fn normalization_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    for case in 0..1000 {
        let (h, w) = (r.random_range(1..12), r.random_range(1..12));
        let res = Resolution::new(h, w);
        let mut counts = RawCounts::empty(res, TimeWindow::new(0, 1).unwrap());
        let hi = if case % 10 == 0 { 1 } else { r.random_range(1..50) };
        for i in 0..h * w {
            counts.m_r[i] = if r.random_bool(0.4) { r.random_range(0..=hi) } else { 0 };
            counts.m_b[i] = if r.random_bool(0.4) { r.random_range(0..=hi) } else { 0 };
            counts.mask[i] = u8::from(counts.m_r[i] + counts.m_b[i] > 0);
        }
        let n = if case % 3 == 0 { 99 } else { r.random_range(1..=100) };
        let pooled: Vec<u32> = counts.m_r.iter().chain(&counts.m_b).copied().collect();
        let mut alpha = sorted_nearest_rank(&pooled, n);
        if alpha == 0 {
            alpha = *pooled.iter().max().unwrap();
        }
        let frame = normalize(&counts, n).map_err(|e| e.to_string())?;
        for i in 0..h * w {
            let expect = |c: u32| if alpha == 0 { 0.0 } else { c.min(alpha) as f64 / alpha as f64 };
            let px = &frame.data[i * 3..i * 3 + 3];
            ensure(px[CH_R] == expect(counts.m_r[i]) && px[CH_B] == expect(counts.m_b[i]), || {
                format!("case {case} pixel {i}: {px:?} vs alpha {alpha}")
            })?;
            ensure(px[CH_MASK] == counts.mask[i] as f64, || format!("case {case}: mask changed"))?;
            ensure(px.iter().all(|v| (0.0..=1.0).contains(v)), || format!("case {case}: value outside [0, 1]"))?;
        }
    }
    within(start, Duration::from_secs(5))?;
    Ok(format!("1000 grids in {:.2?}", start.elapsed()))
}

fn gradient_suite_20_seeds() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut names = 0;
    for seed in 0..20 {
        let reports = gradient_suite(1000 + seed, 1e-4).map_err(|e| e.to_string())?;
        names = reports.len();
        for (name, r) in reports {
            ensure(r.passed(), || format!("{name} seed {seed}: rel error {:e}", r.max_rel_error))?;
            worst = worst.max(r.max_rel_error);
        }
    }
    within(start, Duration::from_secs(60))?;
    Ok(format!("{names} losses x 20 seeds, worst rel error {worst:.2e}, {:.1?}", start.elapsed()))
}

fn stop_gradient_contract() -> Outcome {
    let mut r = rng(3);
    let head = ProjectionHead::mlp(&mut r, 8, 8);
    let w = AlignWeights::default();
    let zs: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&mut r, &[5, 8], 1.0)).collect();
    let alignment: Vec<(&str, Box<dyn Fn(&mut Graph, &[Var]) -> gep::Result<Var>>)> = vec![
        ("cosine", Box::new(|g, v| cosine_align_term(g, v[0], v[1]))),
        (
            "info_nce",
            Box::new(|g, v| {
                let h = head.bind_const(g);
                info_nce_term(g, v[0], v[1], w.tau, &h)
            }),
        ),
        ("preservation", Box::new(|g, v| preservation_term(g, v[2], v[1], w.mu))),
        (
            "total",
            Box::new(|g, v| {
                let h = head.bind_const(g);
                total_alignment_term(g, v[0], v[1], v[2], &w, &h)
            }),
        ),
    ];
    for (name, f) in &alignment {
        let (_, grads) = evaluate_with_grad(|g: &mut Graph, v: &[Var]| f(g, v), &zs).map_err(|e| e.to_string())?;
        ensure(grads[1].data().iter().all(|&x| x == 0.0), || format!("{name}: nonzero gradient on z_i"))?;
    }

    let (h, wd) = (16, 16);
    let pred = Tensor::uniform(&mut r, &[h, wd], 0.5, 10.0);
    let gt = Tensor::uniform(&mut r, &[h, wd], 0.5, 10.0);
    let mask = Tensor::new(&[h, wd], (0..h * wd).map(|_| if r.random_bool(0.7) { 1.0 } else { 0.0 }).collect()).unwrap();
    let sup = DepthSupervision::new(gt.clone(), mask.clone());
    let depth: Vec<(&str, Box<dyn Fn(&mut Graph, &[Var]) -> gep::Result<Var>>)> = vec![
        ("silog", Box::new(|g, v| silog_term(g, v[0], &gt, &mask, 0.85))),
        ("ms_grad", Box::new(|g, v| ms_grad_term(g, v[0], &gt, &mask, &[1, 2, 4]))),
        ("depth_total", Box::new(|g, v| depth_total_term(g, v[0], &sup))),
    ];
    let masked = mask.data().iter().filter(|&&m| m == 0.0).count();
    for (name, f) in &depth {
        let (_, grads) =
            evaluate_with_grad(|g: &mut Graph, v: &[Var]| f(g, v), std::slice::from_ref(&pred)).map_err(|e| e.to_string())?;
        for (gv, &m) in grads[0].data().iter().zip(mask.data()) {
            ensure(m == 1.0 || *gv == 0.0, || format!("{name}: gradient {gv:e} on a masked pixel"))?;
        }
    }
    Ok(format!("4 alignment losses, 3 depth losses, {masked} masked pixels"))
}

fn closed_forms() -> Outcome {
    let mut zi = Tensor::zeros(&[2, 4]);
    zi.set(0, 0, 1.0);
    zi.set(1, 1, 1.0);
    let v = info_nce(&zi, &zi, 1.0, &ProjectionHead::Identity).map_err(|e| e.to_string())?;
    let expect = (1.0 + (-1.0f64).exp()).ln();
    ensure((v - expect).abs() < 1e-9, || format!("InfoNCE {v} vs {expect}"))?;

    let mut r = rng(4);
    let gt = Tensor::uniform(&mut r, &[8, 8], 0.5, 10.0);
    let mask = Tensor::filled(&[8, 8], 1.0);
    for c in [0.5, 2.0, std::f64::consts::E, 10.0] {
        let s = silog_loss(&gt.map(|d| d * c), &gt, &mask, 0.85).map_err(|e| e.to_string())?;
        let expect = (1.0f64 - 0.85).sqrt() * c.ln().abs();
        ensure((s - expect).abs() < 1e-9, || format!("silog c={c}: {s} vs {expect}"))?;
    }

    let range = DepthRange::new(0.7, 80.0).map_err(|e| e.to_string())?;
    let d = denorm_log_depth(&Tensor::vector(vec![0.0, 1.0]), &range);
    ensure(d.data() == [0.7, 80.0], || format!("endpoints {:?}", d.data()))?;
    Ok(format!("InfoNCE {v:.12}, silog sqrt(0.15)|log c|, endpoints exact"))
}

fn causality_sweep() -> Outcome {
    let model = Transformer::new(TransformerConfig {
        max_window: 32,
        seed: 5,
        ..TransformerConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let k = 32;
    let mut r = rng(5);
    let x = Tensor::randn(&mut r, &[k, model.cfg.dim], 1.0);
    let base = model.forward(&x).map_err(|e| e.to_string())?;
    let d = model.cfg.dim;
    for pos in 0..k {
        let mut y = x.clone();
        for c in 0..d {
            y.set(pos, c, y.at(pos, c) + r.random_range(-3.0..3.0));
        }
        let out = model.forward(&y).map_err(|e| e.to_string())?;
        for row in 0..pos {
            ensure(out.row(row) == base.row(row), || format!("perturbing {pos} changed output {row}"))?;
        }
        ensure(out.row(pos) != base.row(pos), || format!("perturbing {pos} had no effect on itself"))?;
    }
    Ok(format!("{k} positions, all earlier outputs bitwise unchanged"))
}

/// Rotations in orthogonal planes observed by two fixed linear read-outs,
/// interleaved as event and image tokens.
fn dynamics_sequence(dim: usize, steps: usize) -> TokenSequence {
    let mut r = rng(6);
    let state_dim = 4;
    let read_e = Tensor::randn(&mut r, &[state_dim, dim], 0.5);
    let read_i = Tensor::randn(&mut r, &[state_dim, dim], 0.5);
    let mut s = vec![1.0, 0.0, 0.0, 1.0];
    let (a, b) = (std::f64::consts::TAU / 8.0, std::f64::consts::TAU / 4.0);
    let (mut ev, mut im) = (Vec::new(), Vec::new());
    for _ in 0..steps {
        let st = Tensor::new(&[1, state_dim], s.clone()).unwrap();
        ev.extend_from_slice(st.matmul(&read_e).unwrap().data());
        im.extend_from_slice(st.matmul(&read_i).unwrap().data());
        s = vec![
            a.cos() * s[0] - a.sin() * s[1],
            a.sin() * s[0] + a.cos() * s[1],
            b.cos() * s[2] - b.sin() * s[3],
            b.sin() * s[2] + b.cos() * s[3],
        ];
    }
    let ev = Tensor::new(&[steps, dim], ev).unwrap();
    let im = Tensor::new(&[steps, dim], im).unwrap();
    interleave(&ev, &im).unwrap()
}

/// Generation with the whole sequence visible at every step.
fn unbounded_rollout(model: &Transformer, ctx: &TokenSequence, horizon: usize) -> TokenSequence {
    let mut out = ctx.clone();
    for _ in 0..horizon {
        let preds = model.predict(&out).unwrap();
        let next = preds.row(preds.rows() - 1).to_vec();
        let m = out.modalities[out.len() - 2];
        out.push(&next, m).unwrap();
    }
    out
}

fn ar_learning_signal() -> Outcome {
    let cfg = TransformerConfig {
        dim: 16,
        ff_dim: 64,
        max_window: 16,
        seed: 7,
        ..TransformerConfig::default()
    };
    let mut model = Transformer::new(cfg).map_err(|e| e.to_string())?;
    let seq = dynamics_sequence(16, 48);
    let window = 16;
    let before = lm::evaluate_windows(&model, std::slice::from_ref(&seq), window, 4).map_err(|e| e.to_string())?;
    let mut spec = TrainSpec::desk(500, window);
    spec.schedule.peak = 3e-3;
    lm::train(&mut model, std::slice::from_ref(&seq), &spec).map_err(|e| e.to_string())?;
    let after = lm::evaluate_windows(&model, std::slice::from_ref(&seq), window, 4).map_err(|e| e.to_string())?;
    ensure(after < 0.1 * before, || format!("loss {before:.4} -> {after:.4}"))?;

    let ctx = seq.slice(0, 6).unwrap();
    let horizon = window - ctx.len();
    let slid = rollout(&model, &ctx, &RolloutSpec { horizon, window, block: 1 }).map_err(|e| e.to_string())?;
    let full = unbounded_rollout(&model, &ctx, horizon);
    ensure(slid == full, || "sliding and unbounded rollouts differ".into())?;
    ensure(slid.modalities.iter().enumerate().all(|(k, m)| *m == if k % 2 == 0 { Modality::Event } else { Modality::Image }), || {
        "modality pattern broken".into()
    })?;
    Ok(format!("loss {before:.4} -> {after:.4} ({:.1}%), rollout equal over {} tokens", 100.0 * after / before, slid.len()))
}

fn alignment_direction() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    for seed in 0..3 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = RunConfig { seed, ..RunConfig::default() };
        for stage in [Stage::Synth, Stage::Accumulate] {
            run_stage(&cfg, stage, dir.path()).map_err(|e| e.to_string())?;
        }
        let rep = run_stage(&cfg, Stage::Align, dir.path()).map_err(|e| e.to_string())?;
        let get = |k: &str| rep.get_f64(k).unwrap_or(f64::NAN);
        let (s0, s1) = (get("init.silhouette"), get("aligned.silhouette"));
        let (d0, d1) = (get("init.davies_bouldin"), get("aligned.davies_bouldin"));
        let (c0, c1) = (get("init.calinski_harabasz"), get("aligned.calinski_harabasz"));
        ensure(s1 > s0 && c1 > c0 && d1 < d0, || {
            format!("seed {seed}: sil {s0:.4}->{s1:.4}, DB {d0:.4}->{d1:.4}, CH {c0:.2}->{c1:.2}")
        })?;
        lines.push(format!("seed {seed}: sil {s0:.3}->{s1:.3} DB {d0:.2}->{d1:.2} CH {c0:.1}->{c1:.1}"));
    }
    within(start, Duration::from_secs(300))?;
    Ok(format!("{}; {:.0?}", lines.join("; "), start.elapsed()))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Textbook O(N²) clustering indices.
fn cluster_oracle(x: &Tensor, labels: &[u32]) -> (f64, f64, f64) {
    let n = x.rows();
    let k = *labels.iter().max().unwrap() as usize + 1;
    let d = x.cols();
    let members: Vec<Vec<usize>> = (0..k).map(|c| (0..n).filter(|&i| labels[i] as usize == c).collect()).collect();
    let centroid = |m: &[usize]| -> Vec<f64> {
        (0..d).map(|j| m.iter().map(|&i| x.at(i, j)).sum::<f64>() / m.len() as f64).collect()
    };
    let cents: Vec<Vec<f64>> = members.iter().map(|m| centroid(m)).collect();
    let all: Vec<usize> = (0..n).collect();
    let grand = centroid(&all);

    let mut sil = 0.0;
    for i in 0..n {
        let own = &members[labels[i] as usize];
        if own.len() == 1 {
            continue;
        }
        let a = own.iter().filter(|&&j| j != i).map(|&j| dist(x.row(i), x.row(j))).sum::<f64>() / (own.len() - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != labels[i] as usize)
            .map(|c| members[c].iter().map(|&j| dist(x.row(i), x.row(j))).sum::<f64>() / members[c].len() as f64)
            .fold(f64::INFINITY, f64::min);
        sil += (b - a) / a.max(b);
    }
    sil /= n as f64;

    let sigma: Vec<f64> = (0..k)
        .map(|c| members[c].iter().map(|&i| dist(x.row(i), &cents[c])).sum::<f64>() / members[c].len() as f64)
        .collect();
    let mut db = 0.0;
    for i in 0..k {
        let mut worst = 0.0f64;
        for j in 0..k {
            if i != j {
                worst = worst.max((sigma[i] + sigma[j]) / dist(&cents[i], &cents[j]));
            }
        }
        db += worst;
    }
    db /= k as f64;

    let between: f64 = (0..k).map(|c| members[c].len() as f64 * dist(&cents[c], &grand).powi(2)).sum();
    let within: f64 = (0..n).map(|i| dist(x.row(i), &cents[labels[i] as usize]).powi(2)).sum();
    let ch = (between / (k - 1) as f64) / (within / (n - k) as f64);
    (sil, db, ch)
}

fn metric_oracles() -> Outcome {
    let mut r = rng(8);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + b.abs());
    for case in 0..100 {
        // clustering
        let k = r.random_range(2..5);
        let per: Vec<usize> = (0..k).map(|_| r.random_range(2..6)).collect();
        let labels: Vec<u32> = per.iter().enumerate().flat_map(|(c, &m)| std::iter::repeat_n(c as u32, m)).collect();
        let x = Tensor::randn(&mut r, &[labels.len(), 3], 1.0);
        let got = cluster_metrics(&x, &labels).map_err(|e| e.to_string())?;
        let (s, db, ch) = cluster_oracle(&x, &labels);
        ensure(close(got.silhouette, s) && close(got.davies_bouldin, db) && close(got.calinski_harabasz, ch), || {
            format!("case {case}: cluster {got:?} vs ({s}, {db}, {ch})")
        })?;

        // mIoU / mAcc
        let c = r.random_range(2..6);
        let gt: Vec<u32> = (0..60).map(|_| r.random_range(0..c as u32)).collect();
        let pred: Vec<u32> = (0..60).map(|_| r.random_range(0..c as u32)).collect();
        let conf = ConfusionMatrix::build(c, &gt, &pred, None).map_err(|e| e.to_string())?;
        let (miou, macc) = miou_macc(&conf);
        let (mut iou_sum, mut acc_sum, mut present) = (0.0, 0.0, 0);
        for cls in 0..c as u32 {
            let tp = (0..60).filter(|&i| gt[i] == cls && pred[i] == cls).count() as f64;
            let fp = (0..60).filter(|&i| gt[i] != cls && pred[i] == cls).count() as f64;
            let fnn = (0..60).filter(|&i| gt[i] == cls && pred[i] != cls).count() as f64;
            if tp + fnn == 0.0 {
                continue;
            }
            present += 1;
            iou_sum += tp / (tp + fp + fnn);
            acc_sum += tp / (tp + fnn);
        }
        ensure(close(miou, iou_sum / present as f64) && close(macc, acc_sum / present as f64), || {
            format!("case {case}: miou/macc {miou}, {macc}")
        })?;

        // top-k
        let classes = r.random_range(2..8);
        let scores = Tensor::randn(&mut r, &[10, classes], 1.0);
        let y: Vec<u32> = (0..10).map(|_| r.random_range(0..classes as u32)).collect();
        let kk = r.random_range(1..=classes);
        let hits = (0..10)
            .filter(|&i| {
                let mut order: Vec<usize> = (0..classes).collect();
                order.sort_by(|&a, &b| scores.at(i, b).total_cmp(&scores.at(i, a)).then(a.cmp(&b)));
                order[..kk].contains(&(y[i] as usize))
            })
            .count();
        let acc = topk_accuracy(&scores, &y, kk).map_err(|e| e.to_string())?;
        ensure(close(acc, hits as f64 / 10.0), || format!("case {case}: top-{kk} {acc}"))?;

        // depth errors
        let pred = Tensor::uniform(&mut r, &[5, 7], 0.5, 20.0);
        let gtd = Tensor::uniform(&mut r, &[5, 7], 0.5, 20.0);
        let mut m: Vec<f64> = (0..35).map(|_| if r.random_bool(0.6) { 1.0 } else { 0.0 }).collect();
        m[0] = 1.0;
        let mask = Tensor::new(&[5, 7], m).unwrap();
        let (abs, rms) = depth_errors(&pred, &gtd, &mask).map_err(|e| e.to_string())?;
        let (mut sa, mut sq, mut cnt) = (0.0, 0.0, 0.0);
        for i in 0..35 {
            if mask.data()[i] == 1.0 {
                let e = pred.data()[i] - gtd.data()[i];
                sa += e.abs();
                sq += e * e;
                cnt += 1.0;
            }
        }
        ensure(close(abs, sa / cnt) && close(rms, (sq / cnt).sqrt()), || format!("case {case}: depth {abs}, {rms}"))?;
    }
    Ok("100 instances each for cluster, mIoU/mAcc, top-k, depth".into())
}

fn determinism() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_all(&cfg, a.path()).map_err(|e| e.to_string())?;
    run_all(&cfg, b.path()).map_err(|e| e.to_string())?;
    for stage in Stage::ALL {
        let name = stage.report_name();
        let ra = std::fs::read(a.path().join(&name)).map_err(|e| e.to_string())?;
        let rb = std::fs::read(b.path().join(&name)).map_err(|e| e.to_string())?;
        ensure(ra == rb, || format!("{name} differs between runs"))?;
    }
    Ok(format!("9 stage reports byte-identical, two full runs in {:.0?}", start.elapsed()))
}

fn decoder_bijectivity() -> Outcome {
    let (c, p, h, w) = (2, 2, 6, 8);
    let d = c * p * p;
    let mut r = rng(10);
    let l = (h / p) * (w / p);
    let tokens = Tensor::randn(&mut r, &[l, d], 1.0);

    // Signed permutation: every product is exact, so the round trip is bitwise.
    let mut perm: Vec<usize> = (0..d).collect();
    perm.reverse();
    perm.swap(1, 5);
    let mut wp = Tensor::zeros(&[d, d]);
    for (i, &j) in perm.iter().enumerate() {
        wp.set(i, j, if i % 2 == 0 { 1.0 } else { -2.0 });
    }
    let dec = PatchDecoder::new(wp, p, c).map_err(|e| e.to_string())?;
    let back = dec.invert(&linear_patch_decode(&tokens, &dec, h, w).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure(back == tokens, || format!("signed permutation round trip off by {:e}", back.max_abs_diff(&tokens)))?;

    let wr = Tensor::randn(&mut r, &[d, d], 1.0);
    let dec = PatchDecoder::new(wr, p, c).map_err(|e| e.to_string())?;
    let back = dec.invert(&linear_patch_decode(&tokens, &dec, h, w).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let err = back.max_abs_diff(&tokens);
    ensure(err < 1e-10, || format!("random invertible weight round trip off by {err:e}"))?;
    Ok(format!("signed permutation exact, random invertible weight max error {err:.1e}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("normalization oracle", normalization_oracle),
        ("gradient suite", gradient_suite_20_seeds),
        ("stop-gradient contract", stop_gradient_contract),
        ("closed-form values", closed_forms),
        ("causality", causality_sweep),
        ("autoregressive learning signal", ar_learning_signal),
        ("alignment direction", alignment_direction),
        ("metric oracles", metric_oracles),
        ("determinism", determinism),
        ("decoder bijectivity", decoder_bijectivity),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
