use rand::seq::index::sample;

use super::data::{frames_from, images_from, labels_from};
use super::train::{cluster_scores, encoder_from, push_scores};
use super::{fmt_f, stream, RunDir, Stage, ENCODERS, FRAMES, SAMPLES, SEG_EVAL, SEG_TRAIN};
use crate::blob::{read_blob_file, read_labels_file, take, write_blob_file, write_labels_file};
use crate::config::RunConfig;
use crate::encoder::{frame_patches, image_patches, PatchEncoder};
use crate::error::{GepError, Result};
use crate::events::PseudoFrame;
use crate::heads::{
    argmax_labels, denorm_log_depth, depth_total, depth_total_term, linear_patch_decode, seg_loss, seg_loss_term,
    DepthSupervision, PatchDecoder,
};
use crate::metrics::{depth_errors, miou_macc, ConfusionMatrix, Report};
use crate::synth::NUM_SHAPES;
use crate::tensor::{AdamW, Graph, Tensor, Var};

const TAG_SEG: u64 = 21;
const TAG_DEPTH: u64 = 22;

struct Inputs {
    student: PatchEncoder,
    init: PatchEncoder,
    teacher: PatchEncoder,
    samples: Vec<(String, Tensor)>,
    frames: Vec<(String, Tensor)>,
}

fn load(cfg: &RunConfig, dir: &RunDir, stage: Stage) -> Result<Inputs> {
    let samples = read_blob_file(&dir.require(stage, SAMPLES, Stage::Synth)?)?;
    let frames = read_blob_file(&dir.require(stage, FRAMES, Stage::Accumulate)?)?;
    let encoders = read_blob_file(&dir.require(stage, ENCODERS, Stage::Align)?)?;
    Ok(Inputs {
        student: encoder_from(&encoders, "student", cfg.patch)?,
        init: encoder_from(&encoders, "init", cfg.patch)?,
        teacher: encoder_from(&encoders, "teacher", cfg.patch)?,
        samples,
        frames,
    })
}

/// Patch tokens of each sample (`L×D`), averaged over its bins.
fn sample_tokens(enc: &PatchEncoder, frames: &[PseudoFrame], bins: usize) -> Result<Vec<Tensor>> {
    let batch = frame_patches(frames, enc.patch)?;
    let tokens = enc.tokens(&batch.patches)?;
    let (l, d) = (batch.per_image, tokens.cols());
    let samples = frames.len() / bins;
    (0..samples)
        .map(|s| {
            let mut acc = vec![0.0; l * d];
            for b in 0..bins {
                let start = (s * bins + b) * l * d;
                for (a, v) in acc.iter_mut().zip(&tokens.data()[start..start + l * d]) {
                    *a += v / bins as f64;
                }
            }
            Tensor::new(&[l, d], acc)
        })
        .collect()
}

fn split_tokens(cfg: &RunConfig, inp: &Inputs, split: &str) -> Result<Vec<Tensor>> {
    let frames = frames_from(&take(&inp.frames, &format!("{split}.frames"))?, cfg);
    sample_tokens(&inp.student, &frames, cfg.bins)
}

/// AdamW on a single decoder weight; `loss` builds the batch objective.
fn fit_decoder<F>(cfg: &RunConfig, mut weight: Tensor, n: usize, steps: usize, lr: f64, tag: u64, loss: F) -> Result<(Tensor, f64, f64)>
where
    F: Fn(&mut Graph, Var, &[usize]) -> Result<Var>,
{
    let mut rng = stream(cfg.seed, tag);
    let schedule = RunConfig::schedule(lr, cfg.align_warmup, steps);
    let mut params = vec![weight.clone()];
    let mut opt = AdamW::new(&params, cfg.weight_decay);
    let (mut first, mut last) = (f64::NAN, f64::NAN);
    let batch = cfg.head_batch.min(n);
    for step in 0..steps {
        let idx = sample(&mut rng, n, batch).into_vec();
        let mut g = Graph::new();
        let w = g.input(params[0].clone());
        let out = loss(&mut g, w, &idx)?;
        let value = g.value(out).item().expect("scalar loss");
        if !value.is_finite() {
            return Err(GepError::Divergence { step, loss: value });
        }
        if step == 0 {
            first = value;
        }
        last = value;
        let grads = g.backward(out)?;
        opt.step(&mut params, &[grads.get(&g, w)], schedule.lr(step));
    }
    weight = params.pop().expect("one parameter");
    Ok((weight, first, last))
}

fn mean_of(g: &mut Graph, terms: Vec<Var>) -> Result<Var> {
    let n = terms.len() as f64;
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / n))
}

pub(super) fn segmentation(cfg: &RunConfig, dir: &RunDir, report: &mut Report) -> Result<()> {
    let inp = load(cfg, dir, Stage::EvalSeg)?;
    let (h, w, p) = (cfg.height, cfg.width, cfg.patch);
    let classes = NUM_SHAPES + 1;
    let cell = h * w;
    let read = |name: &str| -> Result<Vec<u32>> {
        let (lh, lw, bytes) = read_labels_file(&dir.require(Stage::EvalSeg, name, Stage::Synth)?)?;
        if (lh, lw) != (h, w) {
            return Err(GepError::Format(format!("label grids are {lh}×{lw}")));
        }
        Ok(bytes.into_iter().map(u32::from).collect())
    };
    let train_labels = read(SEG_TRAIN)?;
    let eval_labels = read(SEG_EVAL)?;
    let train = split_tokens(cfg, &inp, "train")?;
    let eval = split_tokens(cfg, &inp, "eval")?;
    if train_labels.len() != train.len() * cell || eval_labels.len() != eval.len() * cell {
        return Err(GepError::Format("label grids do not match the samples".into()));
    }

    let d = cfg.embed_dim;
    let init = Tensor::randn(&mut stream(cfg.seed, TAG_SEG + 100), &[d, classes * p * p], 0.01);
    let mut dec = PatchDecoder::new(init.clone(), p, classes)?;
    let (weight, first, last) = fit_decoder(cfg, init, train.len(), cfg.seg_steps, cfg.seg_lr, TAG_SEG, |g, wv, idx| {
        let mut terms = Vec::with_capacity(idx.len());
        for &i in idx {
            let t = g.constant(train[i].clone());
            let logits = dec.decode_term(g, t, wv, h, w)?;
            terms.push(seg_loss_term(g, logits, &train_labels[i * cell..(i + 1) * cell], cfg.ignore_index)?);
        }
        mean_of(g, terms)
    })?;
    dec.weight = weight;

    let mut conf = ConfusionMatrix::new(classes);
    let mut eval_loss = 0.0;
    let mut dumps = Vec::new();
    let mut dump_labels = Vec::new();
    for (i, t) in eval.iter().enumerate() {
        let logits = linear_patch_decode(t, &dec, h, w)?;
        let gt = &eval_labels[i * cell..(i + 1) * cell];
        eval_loss += seg_loss(&logits, gt, cfg.ignore_index)?;
        let pred = argmax_labels(&logits)?;
        conf.add(gt, &pred, cfg.ignore_index)?;
        if i < cfg.dump_count {
            dump_labels.extend(pred.iter().map(|&c| c as u8));
            dumps.push((format!("logits.{i}"), logits));
        }
    }
    let refs: Vec<(&str, &Tensor)> = dumps.iter().map(|(n, t)| (n.as_str(), t)).collect();
    write_blob_file(&dir.path("seg_logits.blob"), &refs)?;
    if !dump_labels.is_empty() {
        write_labels_file(&dir.path("seg_pred.lbl"), h, w, &dump_labels)?;
    }
    let (miou, macc) = miou_macc(&conf);
    let correct: u64 = (0..classes).map(|c| conf.get(c, c)).sum();
    report.push("classes", classes);
    report.push("train_loss_first", fmt_f(first));
    report.push("train_loss_last", fmt_f(last));
    report.push("eval_loss", fmt_f(eval_loss / eval.len() as f64));
    report.push("miou", fmt_f(miou));
    report.push("macc", fmt_f(macc));
    report.push("pixel_acc", fmt_f(correct as f64 / conf.total().max(1) as f64));
    Ok(())
}

pub(super) fn depth(cfg: &RunConfig, dir: &RunDir, report: &mut Report) -> Result<()> {
    let inp = load(cfg, dir, Stage::EvalDepth)?;
    let (h, w, p) = (cfg.height, cfg.width, cfg.patch);
    let range = cfg.depth_range();
    let (lmin, span) = (range.log_min(), range.log_span());
    let train = split_tokens(cfg, &inp, "train")?;
    let eval = split_tokens(cfg, &inp, "eval")?;
    let maps = |split: &str| -> Result<Vec<DepthSupervision>> {
        let gt = images_from(&take(&inp.samples, &format!("{split}.depth"))?, cfg)?;
        let mask = images_from(&take(&inp.samples, &format!("{split}.depth_mask"))?, cfg)?;
        Ok(gt
            .into_iter()
            .zip(mask)
            .map(|(g, m)| DepthSupervision {
                scales: cfg.depth_scales.clone(),
                lambda: cfg.silog_lambda,
                w_silog: cfg.w_silog,
                w_ms_grad: cfg.w_ms_grad,
                ..DepthSupervision::new(g, m)
            })
            .collect())
    };
    let train_sup = maps("train")?;
    let eval_sup = maps("eval")?;
    if train_sup.len() != train.len() || eval_sup.len() != eval.len() {
        return Err(GepError::Format("depth maps do not match the samples".into()));
    }

    let d = cfg.embed_dim;
    let init = Tensor::randn(&mut stream(cfg.seed, TAG_DEPTH + 100), &[d, p * p], 0.01);
    let mut dec = PatchDecoder::new(init.clone(), p, 1)?;
    let (weight, first, last) = fit_decoder(cfg, init, train.len(), cfg.depth_steps, cfg.depth_lr, TAG_DEPTH, |g, wv, idx| {
        let mut terms = Vec::with_capacity(idx.len());
        for &i in idx {
            let t = g.constant(train[i].clone());
            let logits = dec.decode_term(g, t, wv, h, w)?;
            let y = g.reshape(logits, &[h, w])?;
            let y = g.sigmoid(y);
            let l = g.scale(y, span);
            let l = g.add_scalar(l, lmin);
            let depth = g.exp(l);
            terms.push(depth_total_term(g, depth, &train_sup[i])?);
        }
        mean_of(g, terms)
    })?;
    dec.weight = weight;

    let (mut abs, mut rms, mut total) = (0.0, 0.0, 0.0);
    let mut dumps = Vec::new();
    for (i, (t, sup)) in eval.iter().zip(&eval_sup).enumerate() {
        let logits = linear_patch_decode(t, &dec, h, w)?.reshape(&[h, w])?;
        let pred = denorm_log_depth(&logits.map(|v| 1.0 / (1.0 + (-v).exp())), &range);
        let (a, r) = depth_errors(&pred, &sup.depth_gt, &sup.mask)?;
        abs += a;
        rms += r;
        total += depth_total(&pred, sup)?;
        if i < cfg.dump_count {
            dumps.push((format!("depth.{i}"), pred));
        }
    }
    let refs: Vec<(&str, &Tensor)> = dumps.iter().map(|(n, t)| (n.as_str(), t)).collect();
    write_blob_file(&dir.path("depth_pred.blob"), &refs)?;
    let n = eval.len() as f64;
    report.push("d_min", fmt_f(range.d_min));
    report.push("d_max", fmt_f(range.d_max));
    report.push("train_loss_first", fmt_f(first));
    report.push("train_loss_last", fmt_f(last));
    report.push("eval_loss", fmt_f(total / n));
    report.push("abs", fmt_f(abs / n));
    report.push("rms", fmt_f(rms / n));
    Ok(())
}

pub(super) fn clusters(cfg: &RunConfig, dir: &RunDir, report: &mut Report) -> Result<()> {
    let inp = load(cfg, dir, Stage::EvalCluster)?;
    let labels = labels_from(&take(&inp.samples, "eval.labels")?);
    let ev_labels: Vec<u32> = labels.iter().flat_map(|&l| std::iter::repeat_n(l, cfg.bins)).collect();
    let events = frame_patches(&frames_from(&take(&inp.frames, "eval.frames")?, cfg), cfg.patch)?;
    let images = image_patches(&images_from(&take(&inp.samples, "eval.images")?, cfg)?, cfg.patch)?;
    let before = cluster_scores(&inp.init, &events, &ev_labels)?;
    let after = cluster_scores(&inp.student, &events, &ev_labels)?;
    let teacher = cluster_scores(&inp.teacher, &images, &labels)?;
    report.push("points", ev_labels.len());
    report.push("classes", NUM_SHAPES);
    push_scores(report, "init", &before);
    push_scores(report, "aligned", &after);
    push_scores(report, "teacher_on_images", &teacher);
    report.push("silhouette_up", after.silhouette > before.silhouette);
    report.push("davies_bouldin_down", after.davies_bouldin < before.davies_bouldin);
    report.push("calinski_harabasz_up", after.calinski_harabasz > before.calinski_harabasz);
    Ok(())
}
