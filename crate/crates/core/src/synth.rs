//! Rendered moving shapes with event streams from log-intensity threshold
//! crossings, paired frames and dense labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GepError, Result};
use crate::events::{Event, Polarity, Resolution, TimeWindow};
use crate::tensor::Tensor;

pub const NUM_SHAPES: usize = 8;
pub const BACKGROUND: f64 = 0.2;
pub const FOREGROUND: f64 = 0.8;
/// Darker texture level on objects; still a full threshold above the background.
pub const TEXTURE_LOW: f64 = 0.45;
const LOG_OFFSET: f64 = 1e-3;

/// One object moving over a static background. Motion wraps around the
/// image borders, so every clip is periodic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthScene {
    /// Drives the noise events only.
    pub seed: u64,
    pub resolution: Resolution,
    /// Rendered frames; events come from the `frames − 1` intervals.
    pub frames: usize,
    pub fps: f64,
    /// Log-intensity contrast per event.
    pub threshold: f64,
    /// Probability of a noise event per pixel and interval.
    pub noise_rate: f64,
    /// Shape id in `0..NUM_SHAPES`.
    pub class: usize,
    pub center: (f64, f64),
    /// Pixels per frame, `(x, y)`.
    pub velocity: (f64, f64),
    /// Radians per frame.
    pub angular_velocity: f64,
    pub angle: f64,
    pub radius: f64,
    pub object_depth: f64,
}

impl SynthScene {
    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if r.height == 0 || r.width == 0 || r.height > u16::MAX as usize || r.width > u16::MAX as usize {
            return Err(GepError::Parameter(format!("bad resolution {}×{}", r.height, r.width)));
        }
        if self.frames < 2 {
            return Err(GepError::Parameter("a scene needs at least 2 frames".into()));
        }
        if !(self.fps > 0.0 && self.fps <= 1e9) || !(self.threshold > 0.0) || !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(GepError::Parameter("fps, threshold and noise rate out of range".into()));
        }
        if self.class >= NUM_SHAPES || !(self.radius > 0.0) || !(self.object_depth > 0.0) {
            return Err(GepError::Parameter(format!("class {} radius {}", self.class, self.radius)));
        }
        Ok(())
    }

    /// Frame interval in nanoseconds.
    pub fn frame_interval(&self) -> i64 {
        (1e9 / self.fps).round().max(1.0) as i64
    }

    /// `[0, (frames − 1)·Δt)`.
    pub fn window(&self) -> TimeWindow {
        TimeWindow {
            start: 0,
            duration: (self.frames as i64 - 1) * self.frame_interval(),
        }
    }

    fn pose(&self, frame: usize) -> (f64, f64, f64) {
        let k = frame as f64;
        (
            self.center.0 + self.velocity.0 * k,
            self.center.1 + self.velocity.1 * k,
            self.angle + self.angular_velocity * k,
        )
    }

    /// Pixel center `(x, y)` in object coordinates (pixels) at `frame`.
    fn local(&self, frame: usize, x: usize, y: usize) -> (f64, f64) {
        let (cx, cy, a) = self.pose(frame);
        let (w, h) = (self.resolution.width as f64, self.resolution.height as f64);
        let dx = wrap(x as f64 + 0.5 - cx, w);
        let dy = wrap(y as f64 + 0.5 - cy, h);
        let (s, c) = a.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Whether the pixel center `(x, y)` lies on the object in `frame`.
    pub fn covers(&self, frame: usize, x: usize, y: usize) -> bool {
        let (u, v) = self.local(frame, x, y);
        inside(self.class, u / self.radius, v / self.radius)
    }

    pub fn render(&self, frame: usize) -> Tensor {
        let r = self.resolution;
        let data = (0..r.pixels())
            .map(|i| {
                let (u, v) = self.local(frame, i % r.width, i / r.width);
                if inside(self.class, u / self.radius, v / self.radius) {
                    texture(self.class, u, v)
                } else {
                    BACKGROUND
                }
            })
            .collect();
        Tensor::new(&[r.height, r.width], data).expect("grid size")
    }
}

/// Two-level surface pattern of each class, in object pixels.
fn texture(class: usize, u: f64, v: f64) -> f64 {
    let on = |x: f64, period: f64| (x / period).rem_euclid(1.0) < 0.5;
    let high = match class {
        0 => true,
        1 => on(u, 3.0),
        2 => on(u, 6.0),
        3 => on(u, 3.0) == on(v, 3.0),
        4 => on(u, 6.0) == on(v, 6.0),
        5 => on((u * u + v * v).sqrt(), 3.0),
        6 => on(v.atan2(u), std::f64::consts::FRAC_PI_2),
        7 => !(u.rem_euclid(4.0) < 1.0 || v.rem_euclid(4.0) < 1.0),
        _ => true,
    };
    if high { FOREGROUND } else { TEXTURE_LOW }
}

fn wrap(d: f64, period: f64) -> f64 {
    (d + period / 2.0).rem_euclid(period) - period / 2.0
}

/// Unit-radius shape membership in object coordinates.
fn inside(class: usize, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    match class {
        0 => r2 <= 1.0,
        1 => u.abs() <= 0.8 && v.abs() <= 0.8,
        2 => v <= 0.5 && v >= -1.0 + 3f64.sqrt() * u.abs(),
        3 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        4 => (0.3..=1.0).contains(&r2),
        5 => u.abs() + v.abs() <= 1.0,
        6 => u.abs() <= 1.0 && v.abs() <= 0.35,
        7 => (u - 0.5).powi(2) + v * v <= 0.16 || (u + 0.5).powi(2) + v * v <= 0.16,
        _ => false,
    }
}

/// Rendered scene with its events and labels at the last frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub events: Vec<Event>,
    /// `frames` intensity images in `[0, 1]`.
    pub images: Vec<Tensor>,
    /// `0` background, `class + 1` on the object.
    pub segmentation: Vec<u8>,
    pub depth: Tensor,
    pub depth_mask: Tensor,
}

/// Background depth grows linearly from 4 m at the top to 16 m at the bottom.
fn background_depth(y: usize, height: usize) -> f64 {
    4.0 + 12.0 * (y as f64 + 0.5) / height as f64
}

/// Events are emitted whenever the linearly interpolated log intensity of a
/// pixel moves one threshold away from its reference level; the reference
/// then steps by the threshold. Timestamps interpolate within the frame
/// interval. Seeded noise adds uniformly timed events of random polarity.
pub fn synth_scene(scene: &SynthScene) -> Result<SynthOutput> {
    scene.validate()?;
    let res = scene.resolution;
    let images: Vec<Tensor> = (0..scene.frames).map(|k| scene.render(k)).collect();
    let dt = scene.frame_interval();
    let c = scene.threshold;
    let mut events = Vec::new();
    let mut reference: Vec<f64> = images[0].data().iter().map(|&i| (i + LOG_OFFSET).ln()).collect();
    for k in 0..scene.frames - 1 {
        let t0 = k as i64 * dt;
        for (p, refl) in reference.iter_mut().enumerate() {
            let l0 = (images[k].data()[p] + LOG_OFFSET).ln();
            let l1 = (images[k + 1].data()[p] + LOG_OFFSET).ln();
            if l0 == l1 {
                continue;
            }
            let (x, y) = ((p % res.width) as u16, (p / res.width) as u16);
            let at = |level: f64| {
                let frac = (level - l0) / (l1 - l0);
                (t0 + (frac * dt as f64).floor() as i64).clamp(t0, t0 + dt - 1)
            };
            while l1 - *refl >= c {
                *refl += c;
                events.push(Event::new(x, y, at(*refl), Polarity::Positive));
            }
            while *refl - l1 >= c {
                *refl -= c;
                events.push(Event::new(x, y, at(*refl), Polarity::Negative));
            }
        }
    }
    if scene.noise_rate > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
        for k in 0..scene.frames - 1 {
            for p in 0..res.pixels() {
                if rng.random_bool(scene.noise_rate) {
                    let t = k as i64 * dt + rng.random_range(0..dt);
                    let pol = if rng.random_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
                    events.push(Event::new((p % res.width) as u16, (p / res.width) as u16, t, pol));
                }
            }
        }
    }
    events.sort_by_key(|e| (e.t, e.y, e.x, e.p.sign()));

    let last = scene.frames - 1;
    let mut segmentation = vec![0u8; res.pixels()];
    let mut depth = vec![0.0; res.pixels()];
    let mut mask = vec![0.0; res.pixels()];
    let invalid_rows = res.height / 8;
    for p in 0..res.pixels() {
        let (x, y) = (p % res.width, p / res.width);
        let on = scene.covers(last, x, y);
        segmentation[p] = if on { scene.class as u8 + 1 } else { 0 };
        depth[p] = if on { scene.object_depth } else { background_depth(y, res.height) };
        mask[p] = if y >= invalid_rows { 1.0 } else { 0.0 };
    }
    Ok(SynthOutput {
        events,
        images,
        segmentation,
        depth: Tensor::new(&[res.height, res.width], depth)?,
        depth_mask: Tensor::new(&[res.height, res.width], mask)?,
    })
}

/// Scene parameters drawn from `rng`: random position, heading, speed in
/// `[1, 2]` px/frame, slow rotation and object depth in `[2, 3.5]` m.
pub fn random_scene<R: Rng + ?Sized>(rng: &mut R, base: &SynthScene, class: usize) -> SynthScene {
    let r = base.resolution;
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    let speed = rng.random_range(1.0..2.0);
    SynthScene {
        seed: rng.random(),
        class,
        center: (rng.random_range(0.0..r.width as f64), rng.random_range(0.0..r.height as f64)),
        velocity: (speed * heading.cos(), speed * heading.sin()),
        angular_velocity: rng.random_range(-0.05..0.05),
        angle: rng.random_range(0.0..std::f64::consts::TAU),
        radius: base.radius * rng.random_range(0.9..1.1),
        object_depth: rng.random_range(2.0..3.5),
        ..*base
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{accumulate, write_events, read_events};

    fn scene(class: usize) -> SynthScene {
        SynthScene {
            seed: 1,
            resolution: Resolution::new(24, 32),
            frames: 5,
            fps: 100.0,
            threshold: 0.2,
            noise_rate: 0.0,
            class,
            center: (12.0, 10.0),
            velocity: (1.0, 0.0),
            angular_velocity: 0.0,
            angle: 0.0,
            radius: 6.0,
            object_depth: 2.5,
        }
    }

    #[test]
    fn texture_contrast_exceeds_threshold() {
        let ln = |a: f64| (a + LOG_OFFSET).ln();
        assert!(ln(FOREGROUND) - ln(TEXTURE_LOW) > 0.2);
        assert!(ln(TEXTURE_LOW) - ln(BACKGROUND) > 0.2);
    }

    #[test]
    fn static_scene_is_silent() {
        for c in 0..NUM_SHAPES {
            let mut s = scene(c);
            s.velocity = (0.0, 0.0);
            assert!(synth_scene(&s).unwrap().events.is_empty());
        }
    }

    #[test]
    fn noise_free_streams_ignore_the_seed() {
        let a = synth_scene(&scene(3)).unwrap();
        let mut s = scene(3);
        s.seed = 99;
        let b = synth_scene(&s).unwrap();
        assert!(!a.events.is_empty());
        assert_eq!(a.events, b.events);
        s.noise_rate = 0.01;
        let c = synth_scene(&s).unwrap();
        assert!(c.events.len() > a.events.len());
        assert_eq!(c, synth_scene(&s).unwrap());
    }

    #[test]
    fn activity_matches_moving_edges() {
        for c in 0..NUM_SHAPES {
            let mut s = scene(c);
            s.angular_velocity = 0.07;
            let out = synth_scene(&s).unwrap();
            let counts = accumulate(&out.events, s.window(), s.resolution).unwrap();
            for p in 0..s.resolution.pixels() {
                let changed = (0..s.frames - 1).any(|k| out.images[k].data()[p] != out.images[k + 1].data()[p]);
                assert_eq!(counts.mask[p] == 1, changed, "class {c} pixel {p}");
            }
            let total: u32 = counts.m_r.iter().chain(&counts.m_b).sum();
            assert_eq!(total as usize, out.events.len());
        }
    }

    #[test]
    fn events_are_sorted_and_readable() {
        let mut s = scene(5);
        s.noise_rate = 0.02;
        let out = synth_scene(&s).unwrap();
        assert!(out.events.windows(2).all(|w| w[0].t <= w[1].t));
        assert!(out.events.iter().all(|e| s.window().contains(e.t)));
        let mut buf = Vec::new();
        write_events(&mut buf, s.resolution, &out.events).unwrap();
        assert_eq!(read_events(buf.as_slice()).unwrap().events, out.events);
    }

    #[test]
    fn labels_follow_geometry() {
        let s = scene(1);
        let out = synth_scene(&s).unwrap();
        let last = s.frames - 1;
        for p in 0..s.resolution.pixels() {
            let (x, y) = (p % 32, p / 32);
            let on = s.covers(last, x, y);
            assert_eq!(out.segmentation[p] == 2, on);
            assert_eq!(out.images[last].data()[p] != BACKGROUND, on);
            assert!(out.depth.data()[p] > 0.0);
        }
        assert_eq!(out.depth_mask.data().iter().filter(|&&m| m == 0.0).count(), 3 * 32);
    }

    #[test]
    fn motion_wraps_around() {
        let mut s = scene(0);
        s.frames = 33;
        let out = synth_scene(&s).unwrap();
        assert_eq!(out.images[0], out.images[32]);
    }
}
