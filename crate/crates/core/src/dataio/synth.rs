//! Synthetic moving-shapes videos with exact masks and flow.
//!
//! Textures are smooth sinusoids defined in each object's own frame of
//! reference, so warping frame `t` by `flow[t]` reproduces frame `t + 1`
//! everywhere except at shape edges.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::VideoSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    Rectangle { half_w: f32, half_h: f32 },
    Disk { radius: f32 },
}

impl ShapeKind {
    /// Half extents `(x, y)`.
    fn extent(self) -> (f32, f32) {
        match self {
            ShapeKind::Rectangle { half_w, half_h } => (half_w, half_h),
            ShapeKind::Disk { radius } => (radius, radius),
        }
    }

    fn contains(self, dx: f32, dy: f32) -> bool {
        match self {
            ShapeKind::Rectangle { half_w, half_h } => dx.abs() <= half_w && dy.abs() <= half_h,
            ShapeKind::Disk { radius } => dx * dx + dy * dy <= radius * radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub shape: ShapeKind,
    /// Centre `(x, y)` in frame 0.
    pub start: (f32, f32),
    /// Own displacement `(dx, dy)` per frame, on top of the camera's.
    pub velocity: (f32, f32),
    /// Inclusive range of time steps without own motion.
    pub stop: Option<(usize, usize)>,
    pub texture_seed: u64,
}

impl ObjectSpec {
    fn own_velocity(&self, t: usize) -> (f32, f32) {
        match self.stop {
            Some((a, b)) if (a..=b).contains(&t) => (0.0, 0.0),
            _ => self.velocity,
        }
    }

    /// Whether the object moves by itself in at least one step of a clip
    /// with `frames` frames.
    pub fn moves(&self, frames: usize) -> bool {
        (0..frames.saturating_sub(1)).any(|t| self.own_velocity(t) != (0.0, 0.0))
    }

    fn centres(&self, camera: (f32, f32), frames: usize) -> Vec<(f32, f32)> {
        let mut c = self.start;
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            out.push(c);
            let v = self.own_velocity(t);
            c = (c.0 + camera.0 + v.0, c.1 + camera.1 + v.1);
        }
        out
    }
}

/// A fully specified scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub camera_velocity: (f32, f32),
    pub background_seed: u64,
    /// Drawn in order; later objects occlude earlier ones.
    pub objects: Vec<ObjectSpec>,
}

#[derive(Debug, Clone, Copy)]
struct Texture {
    base: [f32; 3],
    amp: f32,
    waves: [(f32, f32, f32); 2],
}

impl Texture {
    fn background(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g: f32 = rng.gen_range(0.35..0.6);
        let mut base = [g; 3];
        for b in &mut base {
            *b += rng.gen_range(-0.04..0.04);
        }
        Texture {
            base,
            amp: 0.1,
            waves: [Self::wave(&mut rng, 0.15, 0.45), Self::wave(&mut rng, 0.15, 0.45)],
        }
    }

    fn object(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hue: f32 = rng.gen_range(0.0..6.0);
        let sat: f32 = rng.gen_range(0.65..1.0);
        let val: f32 = rng.gen_range(0.7..1.0);
        Texture {
            base: hsv(hue, sat, val),
            amp: 0.12,
            waves: [Self::wave(&mut rng, 0.3, 0.9), Self::wave(&mut rng, 0.3, 0.9)],
        }
    }

    fn wave(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> (f32, f32, f32) {
        let f: f32 = rng.gen_range(lo..hi);
        let dir: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
        (f * dir.cos(), f * dir.sin(), rng.gen_range(0.0..std::f32::consts::TAU))
    }

    fn sample(&self, u: f32, v: f32) -> [f32; 3] {
        let s: f32 = self
            .waves
            .iter()
            .map(|&(fu, fv, ph)| (fu * u + fv * v + ph).sin())
            .sum::<f32>()
            * 0.5;
        self.base.map(|b| (b + self.amp * s).clamp(0.0, 1.0))
    }
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

fn inside(c: (f32, f32), ext: (f32, f32), w: usize, h: usize) -> bool {
    c.0 - ext.0 >= 1.0
        && c.1 - ext.1 >= 1.0
        && c.0 + ext.0 <= w as f32 - 2.0
        && c.1 + ext.1 <= h as f32 - 2.0
}

/// Renders a scene. Objects that leave the frame are rejected.
pub fn generate_video(cfg: &SynthConfig) -> Result<VideoSample> {
    let (h, w, t_len) = (cfg.height, cfg.width, cfg.frames);
    if h == 0 || w == 0 || t_len < 2 {
        return Err(Error::Invalid(format!(
            "scene needs positive size and at least 2 frames, got {h}x{w}x{t_len}"
        )));
    }
    let cam = cfg.camera_velocity;
    let tracks: Vec<Vec<(f32, f32)>> = cfg.objects.iter().map(|o| o.centres(cam, t_len)).collect();
    for (i, (o, track)) in cfg.objects.iter().zip(&tracks).enumerate() {
        if let Some(t) = track.iter().position(|&c| !inside(c, o.shape.extent(), w, h)) {
            return Err(Error::Invalid(format!(
                "object {i} of '{}' leaves the frame at t={t}",
                cfg.name
            )));
        }
        if let Some((a, b)) = o.stop {
            if a > b || a >= t_len {
                return Err(Error::Invalid(format!("object {i}: bad stop interval {a}..={b}")));
            }
        }
    }
    let movers: Vec<bool> = cfg.objects.iter().map(|o| o.moves(t_len)).collect();
    let bg = Texture::background(cfg.background_seed);
    let textures: Vec<Texture> = cfg.objects.iter().map(|o| Texture::object(o.texture_seed)).collect();

    let n = h * w;
    let mut sample = VideoSample {
        name: cfg.name.clone(),
        frames: Vec::with_capacity(t_len),
        flow: Vec::with_capacity(t_len),
        masks: Vec::with_capacity(t_len),
    };
    for t in 0..t_len {
        let step = t.min(t_len - 2);
        let offset = (cam.0 * t as f32, cam.1 * t as f32);
        let mut rgb = vec![0.0f32; 3 * n];
        let mut flow = vec![0.0f32; 2 * n];
        let mut mask = vec![0.0f32; n];
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f32, y as f32);
                let top = (0..cfg.objects.len()).rev().find(|&i| {
                    let c = tracks[i][t];
                    cfg.objects[i].shape.contains(px - c.0, py - c.1)
                });
                let p = y * w + x;
                let (color, f) = match top {
                    Some(i) => {
                        let c = tracks[i][t];
                        let v = cfg.objects[i].own_velocity(step);
                        if movers[i] {
                            mask[p] = 1.0;
                        }
                        (textures[i].sample(px - c.0, py - c.1), (cam.0 + v.0, cam.1 + v.1))
                    }
                    None => (bg.sample(px - offset.0, py - offset.1), cam),
                };
                for ch in 0..3 {
                    rgb[ch * n + p] = color[ch];
                }
                flow[p] = f.0;
                flow[n + p] = f.1;
            }
        }
        sample.frames.push(Tensor::new(&[3, h, w], rgb)?);
        sample.flow.push(Tensor::new(&[2, h, w], flow)?);
        sample.masks.push(Tensor::new(&[1, h, w], mask)?);
    }
    // The last frame has no successor; repeat the previous field.
    if t_len >= 2 {
        sample.flow[t_len - 1] = sample.flow[t_len - 2].clone();
    }
    Ok(sample)
}

/// How stop intervals are assigned to moving objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopPattern {
    /// Each mover stops for a random interval with `stop_prob`.
    Random,
    /// Every mover is still in the final `k` frames.
    Tail(usize),
    /// Every mover is still in the first `k` frames.
    Head(usize),
}

/// Distribution over scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Chance that an object after the first never moves.
    pub distractor_prob: f64,
    pub stop_prob: f64,
    pub camera_prob: f64,
    pub min_speed: f32,
    pub max_speed: f32,
    pub max_camera_speed: f32,
    pub min_size: f32,
    pub max_size: f32,
    pub stop_pattern: StopPattern,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            height: 64,
            width: 64,
            frames: 24,
            min_objects: 1,
            max_objects: 2,
            distractor_prob: 0.35,
            stop_prob: 0.3,
            camera_prob: 0.3,
            min_speed: 0.8,
            max_speed: 1.6,
            max_camera_speed: 0.5,
            min_size: 8.0,
            max_size: 13.0,
            stop_pattern: StopPattern::Random,
        }
    }
}

impl SynthOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames < 2 {
            return bad(format!("frames must be at least 2, got {}", self.frames));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > 3 {
            return bad(format!(
                "object count range {}..={} must lie in 1..=3",
                self.min_objects, self.max_objects
            ));
        }
        for (k, p) in [
            ("distractor_prob", self.distractor_prob),
            ("stop_prob", self.stop_prob),
            ("camera_prob", self.camera_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{k} must lie in [0, 1], got {p}"));
            }
        }
        if !(0.0 < self.min_speed && self.min_speed <= self.max_speed) {
            return bad("speeds must satisfy 0 < min_speed <= max_speed".into());
        }
        if !(1.0 <= self.min_size && self.min_size <= self.max_size) {
            return bad("sizes must satisfy 1 <= min_size <= max_size".into());
        }
        let room = self.height.min(self.width) as f32 - 3.0 - 2.0 * self.max_size;
        if room < 1.0 {
            return bad(format!(
                "a {}x{} frame is too small for objects of size {}",
                self.height, self.width, self.max_size
            ));
        }
        match self.stop_pattern {
            StopPattern::Tail(k) | StopPattern::Head(k) if k == 0 || k >= self.frames => {
                bad(format!("still span {k} must lie in 1..{}", self.frames))
            }
            _ => Ok(()),
        }
    }

    /// Draws one scene; the same seed always yields the same scene.
    pub fn sample(&self, name: &str, seed: u64) -> Result<SynthConfig> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h, t_len) = (self.width, self.height, self.frames);
        let room = w.min(h) as f32 - 3.0 - 2.0 * self.max_size;

        let mut camera = (0.0, 0.0);
        if rng.gen_bool(self.camera_prob) {
            let dir: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            let speed = rng
                .gen_range(0.2..=self.max_camera_speed.max(0.2))
                .min(0.5 * room / (t_len - 1) as f32);
            camera = (speed * dir.cos(), speed * dir.sin());
        }

        let count = rng.gen_range(self.min_objects..=self.max_objects);
        let mut objects = Vec::with_capacity(count);
        for i in 0..count {
            let moving = i == 0 || !rng.gen_bool(self.distractor_prob);
            let shape = if rng.gen_bool(0.5) {
                ShapeKind::Disk {
                    radius: rng.gen_range(self.min_size..=self.max_size),
                }
            } else {
                ShapeKind::Rectangle {
                    half_w: rng.gen_range(self.min_size * 0.8..=self.max_size),
                    half_h: rng.gen_range(self.min_size * 0.8..=self.max_size),
                }
            };
            let mut velocity = (0.0, 0.0);
            let mut stop = None;
            if moving {
                let dir: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
                let speed = rng.gen_range(self.min_speed..=self.max_speed);
                velocity = (speed * dir.cos(), speed * dir.sin());
                stop = match self.stop_pattern {
                    StopPattern::Tail(k) => Some((t_len - k, t_len - 1)),
                    StopPattern::Head(k) => Some((0, k - 1)),
                    StopPattern::Random if t_len >= 9 && rng.gen_bool(self.stop_prob) => {
                        let len = rng.gen_range(3..=t_len / 3);
                        let a = rng.gen_range(1..t_len - 1 - len);
                        Some((a, a + len - 1))
                    }
                    StopPattern::Random => None,
                };
            }
            let mut obj = ObjectSpec {
                shape,
                start: (0.0, 0.0),
                velocity,
                stop,
                texture_seed: rng.gen(),
            };
            // Shrink the own velocity until some start position keeps the
            // whole track inside the frame.
            let ext = shape.extent();
            let mut placed = false;
            for _ in 0..12 {
                let track = obj.centres(camera, t_len);
                let span = |f: fn(&(f32, f32)) -> f32| {
                    track.iter().map(f).fold((f32::MAX, f32::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)))
                };
                let (dx_lo, dx_hi) = span(|c| c.0);
                let (dy_lo, dy_hi) = span(|c| c.1);
                let x_lo = 1.0 + ext.0 - dx_lo;
                let x_hi = w as f32 - 2.0 - ext.0 - dx_hi;
                let y_lo = 1.0 + ext.1 - dy_lo;
                let y_hi = h as f32 - 2.0 - ext.1 - dy_hi;
                if x_lo <= x_hi && y_lo <= y_hi {
                    obj.start = (rng.gen_range(x_lo..=x_hi), rng.gen_range(y_lo..=y_hi));
                    placed = true;
                    break;
                }
                obj.velocity = (obj.velocity.0 * 0.7, obj.velocity.1 * 0.7);
            }
            if !placed {
                return Err(Error::Invalid(format!(
                    "could not place object {i} of scene '{name}' inside the frame"
                )));
            }
            objects.push(obj);
        }
        // Distractors go underneath so movers stay fully visible.
        objects.sort_by_key(|o| o.moves(t_len));
        Ok(SynthConfig {
            name: name.to_string(),
            height: h,
            width: w,
            frames: t_len,
            camera_velocity: camera,
            background_seed: rng.gen(),
            objects,
        })
    }
}

fn video_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// `count` videos named `seq_00000`, `seq_00001`, ...
pub fn generate_dataset(opts: &SynthOptions, count: usize, seed: u64) -> Result<Vec<VideoSample>> {
    (0..count)
        .map(|i| generate_video(&opts.sample(&format!("seq_{i:05}"), video_seed(seed, i))?))
        .collect()
}
