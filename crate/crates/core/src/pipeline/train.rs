use std::fs::{self, File};
use std::io::{BufReader, BufWriter};

use super::data::{frames_from, images_from, labels_from};
use super::{fmt_f, stream, RunDir, Stage, CHECKPOINT, ENCODERS, FRAMES, SAMPLES};
use crate::align::ProjectionHead;
use crate::blob::{read_blob_file, take, write_blob_file};
use crate::config::RunConfig;
use crate::encoder::{frame_patches, image_patches, train_alignment, AlignTrainSpec, Classifier, PatchBatch, PatchEncoder};
use crate::error::{GepError, Result};
use crate::lm::{self, read_checkpoint, write_checkpoint, write_loss_curve, RolloutSpec, TrainSpec, Transformer};
use crate::metrics::{cluster_metrics, topk_accuracy, ClusterScores, Report};
use crate::seq::{image_only, interleave_blocks, Modality, TokenSequence};
use crate::tensor::Tensor;

const TAG_TEACHER_INIT: u64 = 11;
const TAG_STUDENT_INIT: u64 = 12;
const TAG_TEACHER_TRAIN: u64 = 13;
const TAG_ALIGN_TRAIN: u64 = 14;
const TAG_PRETRAIN: u64 = 15;

const ENCODER_PARTS: [&str; 4] = ["w1", "b1", "w2", "b2"];

pub(super) fn encoder_tensors(prefix: &str, enc: &PatchEncoder) -> Vec<(String, Tensor)> {
    ENCODER_PARTS
        .iter()
        .zip(enc.params())
        .map(|(p, t)| (format!("{prefix}.{p}"), t))
        .collect()
}

pub(super) fn encoder_from(blob: &[(String, Tensor)], prefix: &str, patch: usize) -> Result<PatchEncoder> {
    let t = |p: &str| take(blob, &format!("{prefix}.{p}"));
    let enc = PatchEncoder {
        patch,
        w1: t("w1")?,
        b1: t("b1")?,
        w2: t("w2")?,
        b2: t("b2")?,
    };
    if enc.w1.rows() != 3 * patch * patch {
        return Err(GepError::Format(format!("encoder `{prefix}` does not match patch size {patch}")));
    }
    Ok(enc)
}

/// Each image repeated once per accumulation bin, matching frame order.
fn repeat_bins<T: Clone>(items: &[T], bins: usize) -> Vec<T> {
    items.iter().flat_map(|x| std::iter::repeat_n(x.clone(), bins)).collect()
}

/// Rows scaled to unit length; the alignment losses only see directions.
pub(super) fn unit_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let c = t.cols();
    for row in out.data_mut().chunks_mut(c) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

pub(super) fn cluster_scores(enc: &PatchEncoder, batch: &PatchBatch, labels: &[u32]) -> Result<ClusterScores> {
    cluster_metrics(&unit_rows(&enc.features(batch)?), labels)
}

pub(super) fn push_scores(report: &mut Report, prefix: &str, s: &ClusterScores) {
    report.push(format!("{prefix}.silhouette"), fmt_f(s.silhouette));
    report.push(format!("{prefix}.davies_bouldin"), fmt_f(s.davies_bouldin));
    report.push(format!("{prefix}.calinski_harabasz"), fmt_f(s.calinski_harabasz));
}

fn write_curve(dir: &RunDir, name: &str, curve: &[lm::LossRecord]) -> Result<()> {
    write_loss_curve(BufWriter::new(File::create(dir.path(name))?), curve)
}

pub(super) fn align(cfg: &RunConfig, dir: &RunDir, report: &mut Report) -> Result<()> {
    let samples = read_blob_file(&dir.require(Stage::Align, SAMPLES, Stage::Synth)?)?;
    let frames = read_blob_file(&dir.require(Stage::Align, FRAMES, Stage::Accumulate)?)?;
    let p = cfg.patch;

    let teacher_images = images_from(&take(&samples, "teacher.images")?, cfg)?;
    let teacher_labels = labels_from(&take(&samples, "teacher.labels")?);
    let eval_images = images_from(&take(&samples, "eval.images")?, cfg)?;
    let eval_labels = labels_from(&take(&samples, "eval.labels")?);
    let mut rng = stream(cfg.seed, TAG_TEACHER_INIT);
    let base = PatchEncoder::random(&mut rng, p, cfg.hidden, cfg.embed_dim);
    let mut classifier = Classifier::new(&mut rng, base, crate::synth::NUM_SHAPES);
    let tspec = AlignTrainSpec {
        steps: cfg.teacher_steps,
        batch: cfg.teacher_batch,
        schedule: RunConfig::schedule(cfg.teacher_lr, cfg.align_warmup, cfg.teacher_steps),
        weight_decay: cfg.weight_decay,
        seed: cfg.seed ^ TAG_TEACHER_TRAIN,
    };
    let tcurve = classifier.train(&image_patches(&teacher_images, p)?, &teacher_labels, &tspec)?;
    let eval_img_batch = image_patches(&eval_images, p)?;
    let scores = classifier.logits(&eval_img_batch)?;
    let k5 = 5.min(crate::synth::NUM_SHAPES);
    report.push("teacher.acc1", fmt_f(topk_accuracy(&scores, &eval_labels, 1)?));
    report.push("teacher.acc5", fmt_f(topk_accuracy(&scores, &eval_labels, k5)?));
    let teacher = classifier.encoder.clone();

    let mut rng = stream(cfg.seed, TAG_STUDENT_INIT);
    let mut student = PatchEncoder::random(&mut rng, p, cfg.hidden, cfg.embed_dim);
    let mut head = ProjectionHead::mlp(&mut rng, cfg.embed_dim, cfg.head_hidden_dim);
    let init = student.clone();

    let train_images = images_from(&take(&samples, "train.images")?, cfg)?;
    let events = frame_patches(&frames_from(&take(&frames, "train.frames")?, cfg), p)?;
    let images = image_patches(&repeat_bins(&train_images, cfg.bins), p)?;
    let zi = teacher.features(&images)?;
    let spec = AlignTrainSpec {
        steps: cfg.align_steps,
        batch: cfg.align_batch,
        schedule: RunConfig::schedule(cfg.align_lr, cfg.align_warmup, cfg.align_steps),
        weight_decay: cfg.weight_decay,
        seed: cfg.seed ^ TAG_ALIGN_TRAIN,
    };
    let curve = train_alignment(&mut student, &mut head, &zi, &events, &images, &cfg.align_weights(), &spec)?;

    let eval_events = frame_patches(&frames_from(&take(&frames, "eval.frames")?, cfg), p)?;
    let eval_ev_labels = repeat_bins(&eval_labels, cfg.bins);
    let before = cluster_scores(&init, &eval_events, &eval_ev_labels)?;
    let after = cluster_scores(&student, &eval_events, &eval_ev_labels)?;

    let mut tensors = encoder_tensors("teacher", &teacher);
    tensors.extend(encoder_tensors("init", &init));
    tensors.extend(encoder_tensors("student", &student));
    tensors.extend(head.params().into_iter().enumerate().map(|(i, t)| (format!("head.{i}"), t)));
    tensors.push(("classifier.weight".into(), classifier.weight.clone()));
    tensors.push(("classifier.bias".into(), classifier.bias.clone()));
    let refs: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    write_blob_file(&dir.path(ENCODERS), &refs)?;
    write_curve(dir, "teacher_loss.csv", &tcurve)?;
    write_curve(dir, "align_loss.csv", &curve)?;

    report.push("teacher.loss_first", fmt_f(tcurve.first().map_or(f64::NAN, |r| r.loss)));
    report.push("teacher.loss_last", fmt_f(tcurve.last().map_or(f64::NAN, |r| r.loss)));
    report.push("align.loss_first", fmt_f(curve.first().map_or(f64::NAN, |r| r.loss)));
    report.push("align.loss_last", fmt_f(curve.last().map_or(f64::NAN, |r| r.loss)));
    push_scores(report, "init", &before);
    push_scores(report, "aligned", &after);
    let improved = after.silhouette > before.silhouette
        && after.calinski_harabasz > before.calinski_harabasz
        && after.davies_bouldin < before.davies_bouldin;
    report.push("clustering_improved", improved);
    Ok(())
}

/// Mean of the patch tokens in each of `q` horizontal bands, per image:
/// `(images·q) × D`.
pub(super) fn band_tokens(enc: &PatchEncoder, batch: &PatchBatch, grid_cols: usize, q: usize) -> Result<Tensor> {
    let tokens = enc.tokens(&batch.patches)?;
    let d = tokens.cols();
    let per = batch.per_image;
    let band = per / q;
    if band == 0 || !per.is_multiple_of(q) || !band.is_multiple_of(grid_cols) {
        return Err(GepError::Shape(format!("{per} patches do not split into {q} bands")));
    }
    let mut out = Vec::with_capacity(batch.images() * q * d);
    for i in 0..batch.images() {
        for b in 0..q {
            let mut acc = vec![0.0; d];
            for t in 0..band {
                for (a, v) in acc.iter_mut().zip(tokens.row(i * per + b * band + t)) {
                    *a += v;
                }
            }
            out.extend(acc.iter().map(|a| a / band as f64));
        }
    }
    Tensor::new(&[batch.images() * q, d], out)
}

/// Averages groups of `bins` consecutive `q`-token blocks.
fn merge_bins(t: &Tensor, q: usize, bins: usize) -> Result<Tensor> {
    if bins == 1 {
        return Ok(t.clone());
    }
    let d = t.cols();
    let steps = t.rows() / (q * bins);
    let mut out = vec![0.0; steps * q * d];
    for s in 0..steps {
        for b in 0..bins {
            for j in 0..q {
                let row = t.row((s * bins + b) * q + j);
                for (o, v) in out[(s * q + j) * d..(s * q + j + 1) * d].iter_mut().zip(row) {
                    *o += v / bins as f64;
                }
            }
        }
    }
    Tensor::new(&[steps * q, d], out)
}

fn build_sequences(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<TokenSequence>> {
    let samples = read_blob_file(&dir.require(Stage::Pretrain, SAMPLES, Stage::Synth)?)?;
    let frames = read_blob_file(&dir.require(Stage::Pretrain, FRAMES, Stage::Accumulate)?)?;
    let encoders = read_blob_file(&dir.require(Stage::Pretrain, ENCODERS, Stage::Align)?)?;
    let student = encoder_from(&encoders, "student", cfg.patch)?;
    let teacher = encoder_from(&encoders, "teacher", cfg.patch)?;
    let (q, p, cols) = (cfg.tokens_per_step, cfg.patch, cfg.width / cfg.patch);

    let clip_frames = frames_from(&take(&frames, "clip.frames")?, cfg);
    let clip_images = images_from(&take(&samples, "clip.images")?, cfg)?;
    let per_clip = cfg.clip_steps;
    if clip_images.len() != cfg.clips * per_clip || clip_frames.len() != cfg.clips * per_clip * cfg.bins {
        return Err(GepError::Format("clip artifacts do not match the config; rerun synth and accumulate".into()));
    }
    let mut seqs = Vec::new();
    for c in 0..cfg.clips {
        let fr = &clip_frames[c * per_clip * cfg.bins..(c + 1) * per_clip * cfg.bins];
        let ev = merge_bins(&band_tokens(&student, &frame_patches(fr, p)?, cols, q)?, q, cfg.bins)?;
        let im = band_tokens(&teacher, &image_patches(&clip_images[c * per_clip..(c + 1) * per_clip], p)?, cols, q)?;
        seqs.push(interleave_blocks(&ev, &im, q, cfg.event_first)?);
    }
    let image_clips = images_from(&take(&samples, "image_clip.images")?, cfg)?;
    for c in 0..cfg.image_clips {
        let im = band_tokens(&teacher, &image_patches(&image_clips[c * per_clip..(c + 1) * per_clip], p)?, cols, q)?;
        seqs.push(image_only(&im)?);
    }
    Ok(seqs)
}

pub(super) fn pretrain(cfg: &RunConfig, dir: &RunDir, report: &mut Report) -> Result<()> {
    let seqs = build_sequences(cfg, dir)?;
    fs::create_dir_all(dir.path("sequences"))?;
    for (i, s) in seqs.iter().enumerate() {
        s.write_to(BufWriter::new(File::create(dir.sequence(i))?), s.len())?;
    }
    let mut model = Transformer::new(cfg.transformer())?;
    let window = cfg.max_window;
    let stride = (window / 4).max(1);
    let initial = lm::evaluate_windows(&model, &seqs, window, stride)?;
    let spec = TrainSpec {
        steps: cfg.pretrain_steps,
        window,
        batch: cfg.pretrain_batch,
        schedule: RunConfig::schedule(cfg.pretrain_lr, cfg.pretrain_warmup, cfg.pretrain_steps),
        weight_decay: cfg.weight_decay,
        seed: cfg.seed ^ TAG_PRETRAIN,
    };
    let curve = lm::train(&mut model, &seqs, &spec)?;
    let fin = lm::evaluate_windows(&model, &seqs, window, stride)?;
    write_checkpoint(&model, BufWriter::new(File::create(dir.path(CHECKPOINT))?))?;
    write_curve(dir, "pretrain_loss.csv", &curve)?;

    report.push("sequences", seqs.len());
    report.push("tokens", seqs.iter().map(TokenSequence::len).sum::<usize>());
    report.push("parameters", model.num_parameters());
    report.push("window", window);
    report.push("eval_loss_initial", fmt_f(initial));
    report.push("eval_loss_final", fmt_f(fin));
    report.push("eval_loss_ratio", fmt_f(fin / initial));
    report.push("train_loss_first", fmt_f(curve.first().map_or(f64::NAN, |r| r.loss)));
    report.push("train_loss_last", fmt_f(curve.last().map_or(f64::NAN, |r| r.loss)));
    Ok(())
}

fn mean_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(super) fn rollout(cfg: &RunConfig, dir: &RunDir, report: &mut Report) -> Result<()> {
    let ckpt = dir.require(Stage::Rollout, CHECKPOINT, Stage::Pretrain)?;
    let model = read_checkpoint(BufReader::new(File::open(ckpt)?))?;
    let seq_path = dir.require(Stage::Rollout, "sequences/seq_00.seq", Stage::Pretrain)?;
    let (truth, _) = TokenSequence::read_from(BufReader::new(File::open(seq_path)?))?;
    let q = cfg.tokens_per_step;
    let ctx_len = cfg.context_steps * 2 * q;
    let horizon = cfg.horizon_steps * 2 * q;
    if truth.len() < ctx_len + horizon {
        return Err(GepError::Range(format!("sequence of {} tokens is shorter than context plus horizon", truth.len())));
    }
    let context = truth.slice(0, ctx_len)?;
    let spec = RolloutSpec {
        horizon,
        window: cfg.max_window,
        block: q,
    };
    let out = lm::rollout(&model, &context, &spec)?;
    out.write_to(BufWriter::new(File::create(dir.path("rollout.seq"))?), out.len())?;

    // Baseline: repeat the last interleaving period of the context.
    let period = 2 * q;
    let (mut err, mut base) = (0.0, 0.0);
    let (mut err_mod, mut n_mod) = ([0.0; 2], [0usize; 2]);
    for k in ctx_len..ctx_len + horizon {
        let t = truth.tokens.row(k);
        let e = mean_sq(out.tokens.row(k), t);
        err += e;
        let rep = ctx_len - period + (k - ctx_len) % period;
        base += mean_sq(truth.tokens.row(rep), t);
        let m = truth.modalities[k].index();
        err_mod[m] += e;
        n_mod[m] += 1;
    }
    let modality_ok = (ctx_len..out.len()).all(|k| out.modalities[k] == truth.modalities[k]);
    report.push("context_tokens", ctx_len);
    report.push("horizon_tokens", horizon);
    report.push("window", cfg.max_window);
    report.push("finite", out.tokens.all_finite());
    report.push("modality_pattern_kept", modality_ok);
    report.push("rollout_mse", fmt_f(err / horizon as f64));
    report.push("repeat_baseline_mse", fmt_f(base / horizon as f64));
    for m in [Modality::Event, Modality::Image] {
        let i = m.index();
        let v = if n_mod[i] > 0 { err_mod[i] / n_mod[i] as f64 } else { 0.0 };
        report.push(format!("rollout_mse.{}", if i == 0 { "event" } else { "image" }), fmt_f(v));
    }
    Ok(())
}
