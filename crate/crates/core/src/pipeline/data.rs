use std::fs;

use rand::Rng;

use super::{fmt_f, stream, RunDir, Stage, FRAMES, SAMPLES, SEG_EVAL, SEG_TRAIN};
use crate::blob::{read_blob_file, take, write_blob_file, write_labels_file};
use crate::config::RunConfig;
use crate::error::{GepError, Result};
use crate::events::{
    accumulate_bins, accumulate_windows, augment, normalize, read_events_file, write_events_file, AugPolicy,
    PseudoFrame, RawCounts, TimeWindow, CH_MASK,
};
use crate::metrics::Report;
use crate::synth::{random_scene, synth_scene, SynthScene, NUM_SHAPES};
use crate::tensor::Tensor;

const TAG_TRAIN: u64 = 1;
const TAG_EVAL: u64 = 2;
const TAG_TEACHER: u64 = 3;
const TAG_CLIPS: u64 = 4;
const TAG_IMAGE_CLIPS: u64 = 5;
const TAG_AUGMENT: u64 = 6;

/// Recognition samples of one split: the last rendered frame with its labels.
struct Split {
    images: Vec<f64>,
    labels: Vec<f64>,
    seg: Vec<u8>,
    depth: Vec<f64>,
    depth_mask: Vec<f64>,
    events: usize,
}

fn sample_split(cfg: &RunConfig, dir: &RunDir, name: &str, tag: u64, per_class: usize, with_events: bool) -> Result<Split> {
    let base = cfg.scene(cfg.sample_frames);
    let mut rng = stream(cfg.seed, tag);
    let mut s = Split {
        images: Vec::new(),
        labels: Vec::new(),
        seg: Vec::new(),
        depth: Vec::new(),
        depth_mask: Vec::new(),
        events: 0,
    };
    let mut index = 0;
    for _ in 0..per_class {
        for class in 0..NUM_SHAPES {
            let scene = random_scene(&mut rng, &base, class);
            if with_events {
                let out = synth_scene(&scene)?;
                write_events_file(&dir.events(name, index), cfg.resolution(), &out.events)?;
                s.events += out.events.len();
                s.images.extend_from_slice(out.images[scene.frames - 1].data());
                s.seg.extend_from_slice(&out.segmentation);
                s.depth.extend_from_slice(out.depth.data());
                s.depth_mask.extend_from_slice(out.depth_mask.data());
            } else {
                s.images.extend_from_slice(scene.render(scene.frames - 1).data());
            }
            s.labels.push(class as f64);
            index += 1;
        }
    }
    Ok(s)
}

fn clip_scene(cfg: &RunConfig, rng: &mut impl Rng) -> SynthScene {
    let class = rng.random_range(0..NUM_SHAPES);
    random_scene(rng, &cfg.scene(cfg.clip_steps + 1), class)
}

pub(super) fn synth(cfg: &RunConfig, dir: &RunDir, report: &mut Report) -> Result<()> {
    fs::create_dir_all(dir.path("events"))?;
    let (h, w) = (cfg.height, cfg.width);
    let train = sample_split(cfg, dir, "train", TAG_TRAIN, cfg.train_per_class, true)?;
    let eval = sample_split(cfg, dir, "eval", TAG_EVAL, cfg.eval_per_class, true)?;
    let teacher = sample_split(cfg, dir, "teacher", TAG_TEACHER, cfg.teacher_per_class, false)?;

    let steps = cfg.clip_steps;
    let mut rng = stream(cfg.seed, TAG_CLIPS);
    let mut clip_images = Vec::new();
    let mut clip_events = 0;
    for c in 0..cfg.clips {
        let scene = clip_scene(cfg, &mut rng);
        let out = synth_scene(&scene)?;
        write_events_file(&dir.events("clip", c), cfg.resolution(), &out.events)?;
        clip_events += out.events.len();
        // Step k pairs the events of interval k with the frame that closes it.
        for im in &out.images[1..] {
            clip_images.extend_from_slice(im.data());
        }
    }
    let mut rng = stream(cfg.seed, TAG_IMAGE_CLIPS);
    let mut image_clips = Vec::new();
    for _ in 0..cfg.image_clips {
        let scene = clip_scene(cfg, &mut rng);
        for k in 1..=steps {
            image_clips.extend_from_slice(scene.render(k).data());
        }
    }

    let n_train = cfg.train_per_class * NUM_SHAPES;
    let n_eval = cfg.eval_per_class * NUM_SHAPES;
    let n_teacher = cfg.teacher_per_class * NUM_SHAPES;
    let tensors = [
        ("train.images", Tensor::new(&[n_train, h, w], train.images)?),
        ("train.labels", Tensor::vector(train.labels)),
        ("train.depth", Tensor::new(&[n_train, h, w], train.depth)?),
        ("train.depth_mask", Tensor::new(&[n_train, h, w], train.depth_mask)?),
        ("eval.images", Tensor::new(&[n_eval, h, w], eval.images)?),
        ("eval.labels", Tensor::vector(eval.labels)),
        ("eval.depth", Tensor::new(&[n_eval, h, w], eval.depth)?),
        ("eval.depth_mask", Tensor::new(&[n_eval, h, w], eval.depth_mask)?),
        ("teacher.images", Tensor::new(&[n_teacher, h, w], teacher.images)?),
        ("teacher.labels", Tensor::vector(teacher.labels)),
        ("clip.images", Tensor::new(&[cfg.clips, steps, h, w], clip_images)?),
        ("image_clip.images", Tensor::new(&[cfg.image_clips, steps, h, w], image_clips)?),
    ];
    let refs: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (*n, t)).collect();
    write_blob_file(&dir.path(SAMPLES), &refs)?;
    write_labels_file(&dir.path(SEG_TRAIN), h, w, &train.seg)?;
    write_labels_file(&dir.path(SEG_EVAL), h, w, &eval.seg)?;
    fs::write(dir.path("config.toml"), cfg.to_toml())?;

    report.push("train.samples", n_train);
    report.push("eval.samples", n_eval);
    report.push("teacher.samples", n_teacher);
    report.push("clips", cfg.clips);
    report.push("image_clips", cfg.image_clips);
    report.push("train.events", train.events);
    report.push("eval.events", eval.events);
    report.push("clip.events", clip_events);
    Ok(())
}

fn frames_tensor(frames: &[PseudoFrame], lead: &[usize], cfg: &RunConfig) -> Result<Tensor> {
    let mut shape = lead.to_vec();
    shape.extend([cfg.height, cfg.width, 3]);
    Tensor::new(&shape, frames.iter().flat_map(|f| f.data.iter().copied()).collect())
}

fn active_fraction(frames: &[PseudoFrame]) -> f64 {
    let px: usize = frames.iter().map(|f| f.resolution.pixels()).sum();
    let on: f64 = frames.iter().map(|f| f.channel(CH_MASK).iter().sum::<f64>()).sum();
    on / px.max(1) as f64
}

fn normalize_all(counts: &[RawCounts], n: u32) -> Result<Vec<PseudoFrame>> {
    counts.iter().map(|c| normalize(c, n)).collect()
}

/// `bins` frames per recognition sample, sample-major.
fn sample_frames(cfg: &RunConfig, dir: &RunDir, split: &str, count: usize) -> Result<Vec<PseudoFrame>> {
    let window = cfg.scene(cfg.sample_frames).window();
    let mut frames = Vec::with_capacity(count * cfg.bins);
    for i in 0..count {
        let path = dir.require(Stage::Accumulate, &format!("events/{split}_{i:04}.evt"), Stage::Synth)?;
        let file = read_events_file(&path)?;
        check_resolution(cfg, &file.resolution)?;
        let counts = accumulate_bins(&file.events, window, cfg.resolution(), cfg.bins)?;
        frames.extend(normalize_all(&counts, cfg.percentile)?);
    }
    Ok(frames)
}

fn check_resolution(cfg: &RunConfig, res: &crate::events::Resolution) -> Result<()> {
    if *res != cfg.resolution() {
        return Err(GepError::Format(format!(
            "event file is {}×{}, config expects {}×{}",
            res.height, res.width, cfg.height, cfg.width
        )));
    }
    Ok(())
}

pub(super) fn accumulate(cfg: &RunConfig, dir: &RunDir, report: &mut Report) -> Result<()> {
    let samples = read_blob_file(&dir.require(Stage::Accumulate, super::SAMPLES, Stage::Synth)?)?;
    let n_train = take(&samples, "train.labels")?.len();
    let n_eval = take(&samples, "eval.labels")?.len();
    if n_train != cfg.train_per_class * NUM_SHAPES || n_eval != cfg.eval_per_class * NUM_SHAPES {
        return Err(GepError::Format("synth outputs do not match the config; rerun synth".into()));
    }

    let mut train = sample_frames(cfg, dir, "train", n_train)?;
    if cfg.augment {
        let policy = AugPolicy::default();
        let mut rng = stream(cfg.seed, TAG_AUGMENT);
        for f in &mut train {
            let spec = policy.sample(&mut rng, cfg.resolution());
            *f = augment(f, &spec)?;
        }
    }
    let eval = sample_frames(cfg, dir, "eval", n_eval)?;

    let dt = cfg.scene(cfg.clip_steps + 1).frame_interval();
    let mut windows = Vec::with_capacity(cfg.clip_steps * cfg.bins);
    for k in 0..cfg.clip_steps {
        windows.extend(TimeWindow::new(k as i64 * dt, dt)?.split(cfg.bins)?);
    }
    let mut clip = Vec::new();
    for c in 0..cfg.clips {
        let file = read_events_file(&dir.require(Stage::Accumulate, &format!("events/clip_{c:04}.evt"), Stage::Synth)?)?;
        check_resolution(cfg, &file.resolution)?;
        let counts = accumulate_windows(&file.events, &windows, cfg.resolution())?;
        clip.extend(normalize_all(&counts, cfg.percentile)?);
    }

    let tensors = [
        ("train.frames", frames_tensor(&train, &[n_train * cfg.bins], cfg)?),
        ("eval.frames", frames_tensor(&eval, &[n_eval * cfg.bins], cfg)?),
        ("clip.frames", frames_tensor(&clip, &[cfg.clips, cfg.clip_steps * cfg.bins], cfg)?),
    ];
    let refs: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (*n, t)).collect();
    write_blob_file(&dir.path(FRAMES), &refs)?;

    report.push("percentile", cfg.percentile);
    report.push("bins", cfg.bins);
    report.push("augment", cfg.augment);
    report.push("train.frames", train.len());
    report.push("eval.frames", eval.len());
    report.push("clip.frames", clip.len());
    report.push("train.active_fraction", fmt_f(active_fraction(&train)));
    report.push("eval.active_fraction", fmt_f(active_fraction(&eval)));
    report.push("clip.active_fraction", fmt_f(active_fraction(&clip)));
    Ok(())
}

/// Splits a `[N, H, W, 3]` frame tensor back into pseudo-frames.
pub(super) fn frames_from(t: &Tensor, cfg: &RunConfig) -> Vec<PseudoFrame> {
    let per = cfg.height * cfg.width * 3;
    t.data()
        .chunks(per)
        .map(|c| PseudoFrame {
            resolution: cfg.resolution(),
            data: c.to_vec(),
            percentile: cfg.percentile,
        })
        .collect()
}

/// Splits a `[..., H, W]` image tensor into `H×W` images.
pub(super) fn images_from(t: &Tensor, cfg: &RunConfig) -> Result<Vec<Tensor>> {
    let per = cfg.height * cfg.width;
    t.data()
        .chunks(per)
        .map(|c| Tensor::new(&[cfg.height, cfg.width], c.to_vec()))
        .collect()
}

pub(super) fn labels_from(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|&v| v as u32).collect()
}
