//! Synthetic egocentric event streams.
//!
//! A scene is a procedural background texture plus one or two bright
//! Gaussian blobs ("hands") whose trajectory encodes the gesture class. Head
//! motion is a smooth sinusoidal offset applied to the whole image. Events
//! follow the usual first-order sensor model: each pixel keeps a reference
//! log intensity and fires whenever the current value moves `threshold`
//! away from it, with the timestamp linearly interpolated inside the
//! simulation step. Poisson background activity is added on top.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Event, EventStream, Geometry, Polarity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionProgram {
    LeftSweep,
    RightSweep,
    Circle,
    ConvergePair,
    StaticEgo,
    RightUpLeft,
    RightLeftUp,
    LeftDownRight,
    LeftRightDown,
}

impl MotionProgram {
    pub fn default_classes() -> Vec<MotionProgram> {
        vec![
            MotionProgram::RightUpLeft,
            MotionProgram::RightLeftUp,
            MotionProgram::LeftDownRight,
            MotionProgram::LeftRightDown,
            MotionProgram::ConvergePair,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionProgram::LeftSweep => "left_sweep",
            MotionProgram::RightSweep => "right_sweep",
            MotionProgram::Circle => "circle",
            MotionProgram::ConvergePair => "converge_pair",
            MotionProgram::StaticEgo => "static_ego",
            MotionProgram::RightUpLeft => "right_up_left",
            MotionProgram::RightLeftUp => "right_left_up",
            MotionProgram::LeftDownRight => "left_down_right",
            MotionProgram::LeftRightDown => "left_right_down",
        }
    }

    /// Unit directions of the three equal-duration legs of a trace program
    /// (image coordinates, y down).
    pub fn legs(self) -> Option<[(f64, f64); 3]> {
        const R: (f64, f64) = (1.0, 0.0);
        const L: (f64, f64) = (-1.0, 0.0);
        const U: (f64, f64) = (0.0, -1.0);
        const D: (f64, f64) = (0.0, 1.0);
        match self {
            MotionProgram::RightUpLeft => Some([R, U, L]),
            MotionProgram::RightLeftUp => Some([R, L, U]),
            MotionProgram::LeftDownRight => Some([L, D, R]),
            MotionProgram::LeftRightDown => Some([L, R, D]),
            _ => None,
        }
    }

    pub fn hands(self) -> Handedness {
        match self {
            MotionProgram::ConvergePair => Handedness::Bimanual,
            _ => Handedness::Unimanual,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Handedness {
    Unimanual,
    Bimanual,
}

/// Per-sample motion style.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    /// Hand speed in pixels per second.
    pub speed: f64,
    /// Blob standard deviation in pixels.
    pub blob_sigma: f64,
    /// Peak head-motion speed in pixels per second.
    pub ego_amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleRange {
    pub speed: (f64, f64),
    pub blob_sigma: (f64, f64),
    pub ego_amplitude: (f64, f64),
}

impl StyleRange {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> StyleParams {
        let pick = |(lo, hi): (f64, f64), rng: &mut R| if hi > lo { rng.gen_range(lo..hi) } else { lo };
        StyleParams {
            speed: pick(self.speed, rng),
            blob_sigma: pick(self.blob_sigma, rng),
            ego_amplitude: pick(self.ego_amplitude, rng),
        }
    }

    pub fn contains(&self, s: &StyleParams) -> bool {
        let inside = |(lo, hi): (f64, f64), v: f64| v >= lo && v <= hi;
        inside(self.speed, s.speed) && inside(self.blob_sigma, s.blob_sigma) && inside(self.ego_amplitude, s.ego_amplitude)
    }

    /// True when no parameter interval overlaps the other range's.
    pub fn disjoint_from(&self, other: &StyleRange) -> bool {
        let apart = |a: (f64, f64), b: (f64, f64)| a.1 < b.0 || b.1 < a.0;
        apart(self.speed, other.speed)
            && apart(self.blob_sigma, other.blob_sigma)
            && apart(self.ego_amplitude, other.ego_amplitude)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub width: u16,
    pub height: u16,
    pub duration_us: u64,
    pub classes: Vec<MotionProgram>,
    /// Default head-motion speed (pixels/s) for [`render_scene`] and
    /// [`emit_events`].
    pub ego_amplitude: f64,
    pub speed: f64,
    pub blob_sigma: f64,
    /// Log-intensity step per event.
    pub threshold: f64,
    /// Background activity in events per pixel per second.
    pub noise_rate: f64,
    pub step_us: u64,
    pub seed: u64,
    /// Styles for train/val samples.
    pub train_style: StyleRange,
    /// Styles for test samples when `heterogeneous` is set.
    pub test_style: StyleRange,
    pub heterogeneous: bool,
    pub train_subjects: usize,
    pub test_subjects: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 64,
            height: 64,
            duration_us: 400_000,
            classes: MotionProgram::default_classes(),
            ego_amplitude: 20.0,
            speed: 60.0,
            blob_sigma: 3.5,
            threshold: 0.2,
            noise_rate: 0.2,
            step_us: 1_000,
            seed: 0,
            train_style: StyleRange {
                speed: (40.0, 70.0),
                blob_sigma: (3.0, 4.0),
                ego_amplitude: (5.0, 25.0),
            },
            test_style: StyleRange {
                speed: (72.0, 80.0),
                blob_sigma: (4.1, 4.5),
                ego_amplitude: (26.0, 32.0),
            },
            heterogeneous: true,
            train_subjects: 4,
            test_subjects: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("geometry must be non-empty"));
        }
        if self.duration_us == 0 || self.step_us == 0 {
            return Err(Error::config("duration and step must be positive"));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::config("threshold must be positive"));
        }
        if self.ego_amplitude < 0.0 || self.noise_rate < 0.0 || self.speed < 0.0 {
            return Err(Error::config("amplitudes and rates must be non-negative"));
        }
        if self.classes.is_empty() {
            return Err(Error::config("at least one class is required"));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::new(self.width, self.height)
    }

    pub fn default_style(&self) -> StyleParams {
        StyleParams {
            speed: self.speed,
            blob_sigma: self.blob_sigma,
            ego_amplitude: self.ego_amplitude,
        }
    }
}

/// Mixes a base seed with two indices into an independent stream seed.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TEXTURE_WAVES: usize = 6;
const BLOB_GAIN: f64 = 1.5;
const LOG_EPS: f64 = 1e-3;

/// A fully specified scene; rendering is a pure function of time.
#[derive(Debug, Clone)]
pub struct Scene {
    width: usize,
    height: usize,
    duration_s: f64,
    program: MotionProgram,
    style: StyleParams,
    waves: [(f64, f64, f64, f64); TEXTURE_WAVES],
    ego_freq: (f64, f64),
    ego_phase: (f64, f64),
    ego_dir: (f64, f64),
}

impl Scene {
    pub fn new(cfg: &SynthConfig, class_id: usize, style: StyleParams, seed: u64) -> Result<Self> {
        let program = *cfg
            .classes
            .get(class_id)
            .ok_or_else(|| Error::config(format!("class {class_id} not configured")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut waves = [(0.0, 0.0, 0.0, 0.0); TEXTURE_WAVES];
        for w in &mut waves {
            let wavelength = rng.gen_range(5.0..16.0);
            let angle = rng.gen_range(0.0..PI);
            let k = 2.0 * PI / wavelength;
            *w = (k * angle.cos(), k * angle.sin(), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.5..1.0));
        }
        let theta = rng.gen_range(0.0..2.0 * PI);
        Ok(Scene {
            width: cfg.width as usize,
            height: cfg.height as usize,
            duration_s: cfg.duration_us as f64 * 1e-6,
            program,
            style,
            waves,
            ego_freq: (rng.gen_range(1.0..2.5), rng.gen_range(1.0..2.5)),
            ego_phase: (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)),
            ego_dir: (theta.cos(), theta.sin()),
        })
    }

    pub fn program(&self) -> MotionProgram {
        self.program
    }

    /// Head-motion image offset in pixels. Peak speed equals the style's
    /// ego amplitude.
    pub fn ego_offset(&self, t_s: f64) -> (f64, f64) {
        let amp = self.style.ego_amplitude;
        if amp == 0.0 {
            return (0.0, 0.0);
        }
        let (fx, fy) = self.ego_freq;
        let (px, py) = self.ego_phase;
        let ax = amp * self.ego_dir.0.abs().max(0.3) / (2.0 * PI * fx);
        let ay = amp * self.ego_dir.1.abs().max(0.3) / (2.0 * PI * fy);
        (ax * (2.0 * PI * fx * t_s + px).sin(), ay * (2.0 * PI * fy * t_s + py).sin())
    }

    /// Blob centers before head motion.
    pub fn blob_centers(&self, t_s: f64) -> Vec<(f64, f64)> {
        let (w, h) = (self.width as f64, self.height as f64);
        let (cx, cy) = (w / 2.0, h / 2.0);
        let v = self.style.speed;
        let mid = self.duration_s / 2.0;
        match self.program {
            MotionProgram::LeftSweep => vec![(cx - v * (t_s - mid), cy)],
            MotionProgram::RightSweep => vec![(cx + v * (t_s - mid), cy)],
            MotionProgram::Circle => {
                let r = self.circle_radius();
                let a = v / r * t_s;
                vec![(cx + r * a.cos(), cy + r * a.sin())]
            }
            MotionProgram::ConvergePair => {
                let gap = 0.4 * w - 0.6 * v * t_s;
                vec![(cx - gap, cy), (cx + gap, cy)]
            }
            MotionProgram::StaticEgo => vec![(cx, cy)],
            p => {
                let legs = p.legs().expect("trace program");
                vec![self.trace_point(&legs, cx, cy, t_s)]
            }
        }
    }

    /// Position along a three-leg polyline whose bounding box is centred on
    /// `(cx, cy)`. Each leg lasts a third of the sequence.
    fn trace_point(&self, legs: &[(f64, f64); 3], cx: f64, cy: f64, t_s: f64) -> (f64, f64) {
        let leg_s = self.duration_s / 3.0;
        let d = self.style.speed * leg_s;
        let mut corners = [(0.0, 0.0); 4];
        for (i, &(dx, dy)) in legs.iter().enumerate() {
            corners[i + 1] = (corners[i].0 + d * dx, corners[i].1 + d * dy);
        }
        let span = |f: fn(&(f64, f64)) -> f64| {
            let lo = corners.iter().map(f).fold(f64::INFINITY, f64::min);
            let hi = corners.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
            (lo + hi) / 2.0
        };
        let (mx, my) = (span(|c| c.0), span(|c| c.1));
        let (mut x, mut y) = (cx - mx, cy - my);
        for (i, &(dx, dy)) in legs.iter().enumerate() {
            let step = self.style.speed * (t_s - i as f64 * leg_s).clamp(0.0, leg_s);
            x += step * dx;
            y += step * dy;
        }
        (x, y)
    }

    pub fn circle_radius(&self) -> f64 {
        0.22 * self.width.min(self.height) as f64
    }

    /// Time for one full revolution of the circle program.
    pub fn circle_period_s(&self) -> f64 {
        2.0 * PI * self.circle_radius() / self.style.speed
    }

    /// Background texture at `(x + ox, y + oy)` for the whole grid, in
    /// `[-1, 1]`. Each plane wave splits into row and column factors.
    fn texture_into(&self, ox: f64, oy: f64, out: &mut [f64]) {
        out.fill(0.0);
        let norm: f64 = self.waves.iter().map(|w| w.3).sum();
        let mut col = vec![(0.0, 0.0); self.width];
        for &(kx, ky, ph, a) in &self.waves {
            for (x, c) in col.iter_mut().enumerate() {
                *c = (kx * (x as f64 + ox) + ph).sin_cos();
            }
            for y in 0..self.height {
                let (sy, cy) = (ky * (y as f64 + oy)).sin_cos();
                let row = &mut out[y * self.width..(y + 1) * self.width];
                for (o, &(sx, cx)) in row.iter_mut().zip(&col) {
                    *o += a * (sx * cy + cx * sy);
                }
            }
        }
        for o in out.iter_mut() {
            *o /= norm;
        }
    }

    /// Intensity image, row-major `H x W`.
    pub fn render(&self, t_s: f64) -> Vec<f64> {
        let mut img = vec![0.0; self.width * self.height];
        self.render_into(t_s, &mut img);
        img
    }

    fn render_into(&self, t_s: f64, img: &mut [f64]) {
        let (ox, oy) = self.ego_offset(t_s);
        let centers: Vec<(f64, f64)> = self.blob_centers(t_s).into_iter().map(|(x, y)| (x + ox, y + oy)).collect();
        let inv2s2 = 1.0 / (2.0 * self.style.blob_sigma * self.style.blob_sigma);
        let reach = 4.0 * self.style.blob_sigma;
        self.texture_into(ox, oy, img);
        for y in 0..self.height {
            let yf = y as f64;
            for x in 0..self.width {
                let xf = x as f64;
                let mut v = 0.5 + 0.15 * (2.0 * img[y * self.width + x]).tanh();
                for &(bx, by) in &centers {
                    let (dx, dy) = (xf - bx, yf - by);
                    if dx.abs() < reach && dy.abs() < reach {
                        v += BLOB_GAIN * (-(dx * dx + dy * dy) * inv2s2).exp();
                    }
                }
                img[y * self.width + x] = v;
            }
        }
    }

    /// Threshold-crossing events, sorted by time (stable).
    pub fn events(&self, cfg: &SynthConfig, noise_seed: u64) -> Result<EventStream> {
        let geometry = Geometry::new(self.width as u16, self.height as u16);
        let n = self.width * self.height;
        let mut cur = vec![0.0; n];
        self.render_into(0.0, &mut cur);
        let mut prev_log: Vec<f64> = cur.iter().map(|v| (v + LOG_EPS).ln()).collect();
        let mut reference = prev_log.clone();
        let mut events = Vec::new();
        let theta = cfg.threshold;
        let dt = cfg.step_us;
        let mut t_prev = 0u64;
        while t_prev < cfg.duration_us {
            let t_cur = (t_prev + dt).min(cfg.duration_us);
            let span = t_cur - t_prev;
            self.render_into(t_cur as f64 * 1e-6, &mut cur);
            for (i, v) in cur.iter().enumerate() {
                let l_new = (v + LOG_EPS).ln();
                let l_old = prev_log[i];
                let r = &mut reference[i];
                let (x, y) = ((i % self.width) as u16, (i / self.width) as u16);
                let stamp = |level: f64| {
                    let frac = ((level - l_old) / (l_new - l_old)).clamp(0.0, 1.0);
                    t_prev + ((frac * span as f64) as u64).min(span - 1)
                };
                while l_new - *r >= theta {
                    *r += theta;
                    events.push(Event::new(stamp(*r), x, y, Polarity::Positive));
                }
                while *r - l_new >= theta {
                    *r -= theta;
                    events.push(Event::new(stamp(*r), x, y, Polarity::Negative));
                }
                prev_log[i] = l_new;
            }
            t_prev = t_cur;
        }

        let mean = cfg.noise_rate * n as f64 * cfg.duration_us as f64 * 1e-6;
        if mean > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            let count = Poisson::new(mean)
                .map_err(|e| Error::config(format!("noise rate: {e}")))?
                .sample(&mut rng) as usize;
            for _ in 0..count {
                let t = rng.gen_range(0..cfg.duration_us);
                let x = rng.gen_range(0..self.width) as u16;
                let y = rng.gen_range(0..self.height) as u16;
                let p = if rng.gen::<bool>() { Polarity::Positive } else { Polarity::Negative };
                events.push(Event::new(t, x, y, p));
            }
        }
        events.sort_by_key(|e| e.t);
        EventStream::new(geometry, events)
    }
}

/// Intensity image of `class_id` at time `t_us` with the config's default
/// style and seed.
pub fn render_scene(cfg: &SynthConfig, class_id: usize, t_us: u64) -> Result<Vec<f64>> {
    let scene = Scene::new(cfg, class_id, cfg.default_style(), derive_seed(cfg.seed, class_id as u64, 0))?;
    Ok(scene.render(t_us as f64 * 1e-6))
}

/// Event stream of `class_id` with the config's default style and seed.
pub fn emit_events(cfg: &SynthConfig, class_id: usize) -> Result<EventStream> {
    cfg.validate()?;
    emit_styled(cfg, class_id, cfg.default_style(), derive_seed(cfg.seed, class_id as u64, 0))
}

pub fn emit_styled(cfg: &SynthConfig, class_id: usize, style: StyleParams, seed: u64) -> Result<EventStream> {
    let scene = Scene::new(cfg, class_id, style, seed)?;
    scene.events(cfg, derive_seed(seed, 0xE7, 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    /// One sixth each for validation and test (at least one), rest train.
    pub fn for_per_class(per_class: usize) -> Result<Self> {
        if per_class < 3 {
            return Err(Error::config(format!("need at least 3 samples per class to split, got {per_class}")));
        }
        let held = (per_class / 6).max(1);
        Ok(SplitCounts {
            train: per_class - 2 * held,
            val: held,
            test: held,
        })
    }

    fn split_of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else if index < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabeledStream {
    pub stream: EventStream,
    pub class: usize,
    pub split: Split,
    pub subject: usize,
    pub index: usize,
    pub style: StyleParams,
}

/// Subject profiles: `train_subjects` drawn from the train range, then
/// `test_subjects` from the test range (or the train range when not
/// heterogeneous).
pub fn subject_profiles(cfg: &SynthConfig) -> Vec<StyleParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5B, 0));
    let mut out = Vec::new();
    for _ in 0..cfg.train_subjects.max(1) {
        out.push(cfg.train_style.sample(&mut rng));
    }
    let test_range = if cfg.heterogeneous { cfg.test_style } else { cfg.train_style };
    for _ in 0..cfg.test_subjects.max(1) {
        out.push(test_range.sample(&mut rng));
    }
    out
}

/// Generates `per_class` samples for every class, split train/val/test.
/// Each sample jitters its subject's profile by up to 5% (kept inside the
/// subject's range), so heterogeneous test styles never overlap training.
pub fn gen_dataset(cfg: &SynthConfig, per_class: usize) -> Result<Vec<LabeledStream>> {
    cfg.validate()?;
    let counts = SplitCounts::for_per_class(per_class)?;
    if cfg.heterogeneous && !cfg.train_style.disjoint_from(&cfg.test_style) {
        return Err(Error::config("heterogeneous mode needs disjoint train and test style ranges"));
    }
    let profiles = subject_profiles(cfg);
    let n_train_subj = cfg.train_subjects.max(1);
    let n_test_subj = cfg.test_subjects.max(1);
    let test_range = if cfg.heterogeneous { cfg.test_style } else { cfg.train_style };

    let jobs: Vec<(usize, usize)> = (0..cfg.classes.len())
        .flat_map(|c| (0..per_class).map(move |i| (c, i)))
        .collect();
    jobs.par_iter()
        .map(|&(class, index)| {
            let split = counts.split_of(index);
            let seed = derive_seed(cfg.seed, class as u64 + 1, index as u64 + 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (subject, range) = match split {
                Split::Test => (n_train_subj + index % n_test_subj, test_range),
                _ => (index % n_train_subj, cfg.train_style),
            };
            let base = profiles[subject];
            let mut jitter = |v: f64, (lo, hi): (f64, f64)| (v * rng.gen_range(0.95..1.05)).clamp(lo, hi);
            let style = StyleParams {
                speed: jitter(base.speed, range.speed),
                blob_sigma: jitter(base.blob_sigma, range.blob_sigma),
                ego_amplitude: jitter(base.ego_amplitude, range.ego_amplitude),
            };
            let stream = emit_styled(cfg, class, style, seed)?;
            Ok(LabeledStream {
                stream,
                class,
                split,
                subject,
                index,
                style,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            width: 32,
            height: 32,
            duration_us: 100_000,
            ..SynthConfig::default()
        }
    }

    fn programs() -> Vec<MotionProgram> {
        vec![
            MotionProgram::LeftSweep,
            MotionProgram::RightSweep,
            MotionProgram::Circle,
            MotionProgram::ConvergePair,
            MotionProgram::StaticEgo,
        ]
    }

    #[test]
    fn static_scene_without_ego_is_constant() {
        let cfg = SynthConfig {
            ego_amplitude: 0.0,
            classes: programs(),
            ..small()
        };
        let static_id = 4;
        let a = render_scene(&cfg, static_id, 0).unwrap();
        for t in [1_000, 50_000, 99_000] {
            assert_eq!(render_scene(&cfg, static_id, t).unwrap(), a);
        }
        assert_eq!(render_scene(&cfg, static_id, 0).unwrap(), a);
    }

    #[test]
    fn static_scene_without_noise_emits_nothing() {
        let cfg = SynthConfig {
            ego_amplitude: 0.0,
            noise_rate: 0.0,
            classes: programs(),
            ..small()
        };
        assert!(emit_events(&cfg, 4).unwrap().is_empty());
    }

    #[test]
    fn ego_motion_alone_produces_events() {
        let cfg = SynthConfig {
            ego_amplitude: 20.0,
            noise_rate: 0.0,
            classes: programs(),
            ..SynthConfig::default()
        };
        assert!(!emit_events(&cfg, 4).unwrap().is_empty());
    }

    #[test]
    fn circle_is_periodic() {
        let cfg = SynthConfig {
            classes: programs(),
            ..small()
        };
        let scene = Scene::new(&cfg, 2, cfg.default_style(), 1).unwrap();
        let period = scene.circle_period_s();
        for t in [0.0, 0.013, 0.21] {
            let a = scene.blob_centers(t)[0];
            let b = scene.blob_centers(t + period)[0];
            assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
        }
    }

    #[test]
    fn trace_legs_are_centred_and_switch_on_thirds() {
        let cfg = SynthConfig {
            duration_us: 300_000,
            ..small()
        };
        let style = StyleParams { speed: 60.0, blob_sigma: 3.0, ego_amplitude: 0.0 };
        // right, up, left at 60 px/s for 0.1 s each: a 6 px wide, 6 px tall
        // open box whose bounding box centre is the image centre (16, 16).
        let scene = Scene::new(&cfg, 0, style, 1).unwrap();
        let expect = [(0.0, (13.0, 19.0)), (0.1, (19.0, 19.0)), (0.2, (19.0, 13.0)), (0.3, (13.0, 13.0))];
        for (t, (x, y)) in expect {
            let (bx, by) = scene.blob_centers(t)[0];
            assert!((bx - x).abs() < 1e-9 && (by - y).abs() < 1e-9, "t={t}: ({bx}, {by})");
        }
        let (x, y) = scene.blob_centers(0.05)[0];
        assert!((x - 16.0).abs() < 1e-9 && (y - 19.0).abs() < 1e-9);
    }

    #[test]
    fn trace_pairs_share_legs_in_a_different_order() {
        let pairs = [
            (MotionProgram::RightUpLeft, MotionProgram::RightLeftUp),
            (MotionProgram::LeftDownRight, MotionProgram::LeftRightDown),
        ];
        for (a, b) in pairs {
            let (la, lb) = (a.legs().unwrap(), b.legs().unwrap());
            assert_ne!(la, lb);
            for leg in la {
                assert!(lb.contains(&leg));
            }
        }
    }

    #[test]
    fn determinism_and_validity() {
        let cfg = small();
        for class in 0..cfg.classes.len() {
            let a = emit_events(&cfg, class).unwrap();
            let b = emit_events(&cfg, class).unwrap();
            assert_eq!(a, b);
            assert!(a.events().windows(2).all(|w| w[0].t <= w[1].t));
            assert!(a.last_t().unwrap() < cfg.duration_us);
        }
    }

    #[test]
    fn faster_hands_make_more_events() {
        let cfg = SynthConfig {
            ego_amplitude: 0.0,
            noise_rate: 0.0,
            classes: programs(),
            ..small()
        };
        for class in 0..4 {
            let slow = StyleParams { speed: 30.0, ..cfg.default_style() };
            let fast = StyleParams { speed: 60.0, ..cfg.default_style() };
            let n_slow = emit_styled(&cfg, class, slow, 3).unwrap().len();
            let n_fast = emit_styled(&cfg, class, fast, 3).unwrap().len();
            assert!(n_fast > n_slow, "class {class}: {n_fast} <= {n_slow}");
        }
    }

    #[test]
    fn dataset_splits() {
        let cfg = SynthConfig {
            width: 16,
            height: 16,
            duration_us: 20_000,
            ..SynthConfig::default()
        };
        let set = gen_dataset(&cfg, 12).unwrap();
        assert_eq!(set.len(), 60);
        for split in [Split::Train, Split::Val, Split::Test] {
            let want = if split == Split::Train { 8 } else { 2 };
            for c in 0..5 {
                let n = set.iter().filter(|s| s.split == split && s.class == c).count();
                assert_eq!(n, want);
            }
        }
        assert_eq!(set.iter().filter(|s| s.split == Split::Train).count(), 40);
        for s in &set {
            let range = if s.split == Split::Test { cfg.test_style } else { cfg.train_style };
            assert!(range.contains(&s.style), "{:?}", s.style);
            assert!(!(if s.split == Split::Test { cfg.train_style } else { cfg.test_style }).contains(&s.style));
        }
        assert!(cfg.train_style.disjoint_from(&cfg.test_style));
        assert!(gen_dataset(&cfg, 2).is_err());
        let again = gen_dataset(&cfg, 12).unwrap();
        assert!(set.iter().zip(&again).all(|(a, b)| a.stream == b.stream));
    }

    #[test]
    fn overlapping_ranges_rejected_in_heterogeneous_mode() {
        let mut cfg = small();
        cfg.test_style = cfg.train_style;
        assert!(gen_dataset(&cfg, 6).is_err());
        cfg.heterogeneous = false;
        assert!(gen_dataset(&cfg, 3).is_ok());
    }
}
