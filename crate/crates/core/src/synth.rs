//! Deterministic synthetic corpus.
//!
//! Every clip is a gradient background with drifting sprites and sensor
//! noise. Both classes stage the same localized event: a sprite pair
//! swings together and apart in antiphase along a fixed axis, several
//! reversals per clip. The label lives in the closest approach. Violent
//! pairs collide: the disks overlap and the z-order flips at every
//! contact. Nonviolent pairs always keep a thin gap of daylight. At full
//! view that gap spans about one observation pixel, so separating the
//! classes takes a zoomed look at the contact zone; the gross motion
//! carries no label signal by construction.
//!
//! Everything derives from a PCG32 stream per clip (seed = corpus seed +
//! clip index), and the render path is libm-free, so corpora are
//! byte-identical across runs and platforms.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clip::{Channels, Label, LabeledClip, VideoClip};
use crate::container;
use crate::error::{Error, Result};
use crate::geom::RegionBox;
use crate::rng::Pcg32;

/// Corpus generation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Total clips; labels alternate, so this must be even.
    pub n_clips: usize,
    /// Source frames are square with this side.
    pub frame_size: usize,
    /// Frames per clip.
    pub t: usize,
    /// Event bounding-box side as a fraction of the frame.
    pub event_scale: f64,
    /// Sensor noise sigma in 0..255 pixel units.
    pub noise_std: f64,
    /// Total sprites per clip, the event pair included.
    pub sprites: usize,
    /// Distractor drift speed cap, source pixels per frame.
    pub sprite_speed: f64,
    /// Full oscillation period of the event pair, in frames.
    pub event_period: usize,
    pub seed: u64,
    pub fps: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_clips: 100,
            frame_size: 128,
            t: 24,
            event_scale: 0.25,
            noise_std: 4.0,
            sprites: 6,
            sprite_speed: 1.0,
            event_period: 4,
            seed: 0,
            fps: 24.0,
        }
    }
}

/// Max zoom factor per side after the deepest legal zoom chain under the
/// default priors and step cap; used only to validate frame_size.
const MAX_ZOOM_SHRINK: f64 = 0.6 * 0.6 * 0.6 * 0.6;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clips == 0 || self.n_clips % 2 != 0 {
            return Err(Error::Config(format!(
                "n_clips must be even and nonzero, got {}",
                self.n_clips
            )));
        }
        if !(0.0..=0.5).contains(&self.event_scale) || self.event_scale == 0.0 {
            return Err(Error::Config(format!(
                "event_scale must be in (0, 0.5], got {}",
                self.event_scale
            )));
        }
        if (self.frame_size as f64) * MAX_ZOOM_SHRINK < 4.0 {
            return Err(Error::Config(format!(
                "frame_size {} leaves under 4 source pixels per side at max zoom",
                self.frame_size
            )));
        }
        if self.t < 8 {
            return Err(Error::Config("need at least 8 frames".into()));
        }
        if self.sprites < 2 {
            return Err(Error::Config("need at least the event pair".into()));
        }
        if self.event_period < 2 || self.event_period > self.t / 2 {
            return Err(Error::Config(format!(
                "event_period {} does not fit {} frames",
                self.event_period, self.t
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub label: Label,
    pub split: Split,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gt_box: Option<RegionBox>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub config: SynthConfig,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_VERSION: u32 = 1;

/// A corpus loaded into memory, clip order matching the manifest.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub clips: Vec<LabeledClip>,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Corpus> {
        let manifest: CorpusManifest =
            serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let mut clips = Vec::with_capacity(manifest.entries.len());
        for entry in &manifest.entries {
            let clip = container::read_clip(&dir.join(&entry.file))?.into_u8()?;
            clips.push(LabeledClip {
                clip,
                label: entry.label,
                gt_box: entry.gt_box,
                seed: entry.seed,
            });
        }
        Ok(Corpus { manifest, clips })
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// One sprite's appearance and motion plan.
#[derive(Debug, Clone)]
struct SpritePlan {
    color: [f32; 3],
    radius: f64,
    /// Start position, source pixels.
    pos: [f64; 2],
    /// Drift velocity, source pixels per frame (distractors only).
    vel: [f64; 2],
}

/// Everything needed to render a clip, laid out before rasterization.
#[derive(Debug, Clone)]
pub(crate) struct ClipPlan {
    label: Label,
    /// Corner colors of the background gradient: y0x0, y0x1, y1x0, y1x1.
    bg: [[f32; 3]; 4],
    /// Event-pair center in source pixels.
    center: [f64; 2],
    /// Unit vector of the pair's oscillation axis.
    axis: [f64; 2],
    /// Sprite-0 displacement along the axis at the widest separation.
    off_max: f64,
    /// Displacement at the closest approach; below one disk radius the
    /// pair overlaps, above it a gap stays open.
    off_min: f64,
    /// Random whole-frame shift of the oscillation phase.
    t0: usize,
    pair: [SpritePlan; 2],
    distractors: Vec<SpritePlan>,
}

fn unit_vector(rng: &mut Pcg32) -> [f64; 2] {
    loop {
        let x = rng.uniform_in(-1.0, 1.0);
        let y = rng.uniform_in(-1.0, 1.0);
        let n2 = x * x + y * y;
        if (0.01..=1.0).contains(&n2) {
            let n = n2.sqrt();
            return [x / n, y / n];
        }
    }
}

fn sprite_color(rng: &mut Pcg32) -> [f32; 3] {
    [
        rng.uniform_in(110.0, 255.0) as f32,
        rng.uniform_in(110.0, 255.0) as f32,
        rng.uniform_in(110.0, 255.0) as f32,
    ]
}

/// Triangle wave with period 1, range [-1, 1], peak at phase 0.25.
fn triangle(phase: f64) -> f64 {
    let p = phase - phase.floor();
    if p < 0.25 {
        4.0 * p
    } else if p < 0.75 {
        2.0 - 4.0 * p
    } else {
        4.0 * p - 4.0
    }
}

impl ClipPlan {
    fn build(cfg: &SynthConfig, label: Label, seed: u64) -> ClipPlan {
        let mut rng = Pcg32::new(seed, 0x5e_ed);
        let fs = cfg.frame_size as f64;

        // Fixed corner palette: the gradient doubles as a landmark, so the
        // absolute position of a crop stays readable from its colors.
        let bg = [
            [30.0, 40.0, 100.0],
            [100.0, 50.0, 30.0],
            [35.0, 95.0, 45.0],
            [95.0, 90.0, 35.0],
        ];

        let half_event = cfg.event_scale * fs / 2.0;
        let margin = half_event + 1.0;
        // Events sit near the middle of the frame. Center-heavy zoom
        // chains then stay on target, so the what-signal is learnable
        // before localization gets precise.
        let wander = (0.08 * fs).min(fs / 2.0 - margin).max(0.0);
        let center = [
            fs / 2.0 + rng.uniform_in(-wander, wander),
            fs / 2.0 + rng.uniform_in(-wander, wander),
        ];
        let axis = unit_vector(&mut rng);

        // Pair geometry sized to keep the whole event inside the gt box:
        // sprite centers swing +/- off along the axis and the disk extends
        // another radius beyond that.
        let radius = rng.uniform_in(0.032, 0.042) * fs;
        let off_max = (half_event - radius - 1.0).max(1.2);
        // The classes share their gross kinematics and differ only at the
        // closest approach: violent disks overlap, nonviolent disks keep a
        // thin gap. That contact detail is what zooming buys.
        let off_min_raw = match label {
            Label::Violent => radius - rng.uniform_in(0.010, 0.015) * fs / 2.0,
            Label::NonViolent => radius + rng.uniform_in(0.0125, 0.0175) * fs / 2.0,
        };
        let off_min = off_min_raw.min(off_max - 0.2).max(0.1);
        let t0 = rng.below(cfg.event_period);

        let color_a = sprite_color(&mut rng);
        // High-contrast partner so the z-order flips at contact read as a
        // strong appearance change.
        let color_b = loop {
            let c = sprite_color(&mut rng);
            let dist: f32 = (0..3).map(|i| (c[i] - color_a[i]).abs()).sum();
            if dist >= 200.0 {
                break c;
            }
        };
        let pair = [
            SpritePlan {
                color: color_a,
                radius,
                pos: [0.0, 0.0],
                vel: [0.0, 0.0],
            },
            SpritePlan {
                color: color_b,
                radius,
                pos: [0.0, 0.0],
                vel: [0.0, 0.0],
            },
        ];

        let mut distractors = Vec::new();
        for _ in 2..cfg.sprites {
            let radius = rng.uniform_in(0.035, 0.055) * fs;
            // Spawn clear of the event region so early frames do not mix
            // distractor motion into the gt box.
            let pos = loop {
                let p = [
                    rng.uniform_in(radius, fs - radius),
                    rng.uniform_in(radius, fs - radius),
                ];
                let dx = p[0] - center[0];
                let dy = p[1] - center[1];
                if dx * dx + dy * dy > (2.0 * half_event) * (2.0 * half_event) {
                    break p;
                }
            };
            let dir = unit_vector(&mut rng);
            let speed = rng.uniform_in(0.3, 0.8) * cfg.sprite_speed;
            distractors.push(SpritePlan {
                color: sprite_color(&mut rng),
                radius,
                pos,
                vel: [dir[0] * speed, dir[1] * speed],
            });
        }

        ClipPlan {
            label,
            bg,
            center,
            axis,
            off_max,
            off_min,
            t0,
            pair,
            distractors,
        }
    }

    /// Signed displacement of pair sprite 0 along the axis at frame `t`
    /// (sprite 1 mirrors it). Both classes ride the same triangle wave
    /// between `off_max` and `off_min`; only how close `off_min` lets the
    /// disks get depends on the label.
    pub(crate) fn pair_offset(&self, cfg: &SynthConfig, t: usize) -> f64 {
        let mid = (self.off_max + self.off_min) / 2.0;
        let half = (self.off_max - self.off_min) / 2.0;
        let phase = (t + self.t0) as f64 / cfg.event_period as f64 + 0.25;
        mid + half * triangle(phase)
    }

    /// Pair sprite positions at frame `t`.
    pub(crate) fn pair_positions(&self, cfg: &SynthConfig, t: usize) -> ([f64; 2], [f64; 2]) {
        let off = self.pair_offset(cfg, t);
        let a = [
            self.center[0] + self.axis[0] * off,
            self.center[1] + self.axis[1] * off,
        ];
        let b = [
            self.center[0] - self.axis[0] * off,
            self.center[1] - self.axis[1] * off,
        ];
        (a, b)
    }

    /// Which pair sprite draws on top at frame `t`. Violent clips flip at
    /// every closest approach, so the overlap zone alternates its color;
    /// the nonviolent pair never overlaps and its single flip is cosmetic.
    fn pair_z_top(&self, cfg: &SynthConfig, t: usize) -> usize {
        match self.label {
            Label::Violent => {
                let p = cfg.event_period;
                ((t + self.t0 + p - p / 2) / p) % 2
            }
            Label::NonViolent => usize::from(t >= cfg.t / 2),
        }
    }

    fn distractor_pos(&self, cfg: &SynthConfig, i: usize, t: usize) -> [f64; 2] {
        let d = &self.distractors[i];
        let fs = cfg.frame_size as f64;
        let mut out = [0.0; 2];
        for k in 0..2 {
            // Reflect off the walls; fold the travel into [lo, hi].
            let lo = d.radius;
            let hi = fs - d.radius;
            let span = hi - lo;
            let raw = d.pos[k] + d.vel[k] * t as f64 - lo;
            let period = 2.0 * span;
            let m = raw - period * (raw / period).floor();
            out[k] = lo + if m <= span { m } else { period - m };
        }
        out
    }
}

fn draw_sprite(frame: &mut [f32], fsize: usize, pos: [f64; 2], radius: f64, color: [f32; 3]) {
    let x0 = ((pos[0] - radius - 1.0).floor().max(0.0)) as usize;
    let y0 = ((pos[1] - radius - 1.0).floor().max(0.0)) as usize;
    let x1 = ((pos[0] + radius + 2.0).ceil().min(fsize as f64)) as usize;
    let y1 = ((pos[1] + radius + 2.0).ceil().min(fsize as f64)) as usize;
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f64 + 0.5 - pos[0];
            let dy = y as f64 + 0.5 - pos[1];
            let d = (dx * dx + dy * dy).sqrt();
            let cov = (radius + 0.5 - d).clamp(0.0, 1.0) as f32;
            if cov > 0.0 {
                let i = (y * fsize + x) * 3;
                for c in 0..3 {
                    frame[i + c] += cov * (color[c] - frame[i + c]);
                }
            }
        }
    }
}

/// Render one clip. Fully determined by `(cfg, label, seed)`.
pub fn generate_clip(cfg: &SynthConfig, label: Label, seed: u64) -> Result<LabeledClip> {
    cfg.validate()?;
    let plan = ClipPlan::build(cfg, label, seed);
    let fs = cfg.frame_size;
    let mut noise_rng = Pcg32::new(seed, 0x401_5e);

    // Static background gradient.
    let mut bg = vec![0.0f32; fs * fs * 3];
    for y in 0..fs {
        let fy = y as f32 / (fs - 1) as f32;
        for x in 0..fs {
            let fx = x as f32 / (fs - 1) as f32;
            let i = (y * fs + x) * 3;
            for c in 0..3 {
                let top = plan.bg[0][c] + fx * (plan.bg[1][c] - plan.bg[0][c]);
                let bot = plan.bg[2][c] + fx * (plan.bg[3][c] - plan.bg[2][c]);
                bg[i + c] = top + fy * (bot - top);
            }
        }
    }

    let mut data = Vec::with_capacity(cfg.t * fs * fs * 3);
    let mut frame = vec![0.0f32; fs * fs * 3];
    for t in 0..cfg.t {
        frame.copy_from_slice(&bg);

        for i in 0..plan.distractors.len() {
            let pos = plan.distractor_pos(cfg, i, t);
            let d = &plan.distractors[i];
            draw_sprite(&mut frame, fs, pos, d.radius, d.color);
        }
        let (pa, pb) = plan.pair_positions(cfg, t);
        let top = plan.pair_z_top(cfg, t);
        let order = if top == 0 { [1, 0] } else { [0, 1] };
        for &i in &order {
            let pos = if i == 0 { pa } else { pb };
            draw_sprite(&mut frame, fs, pos, plan.pair[i].radius, plan.pair[i].color);
        }

        for px in 0..fs * fs {
            let n = (noise_rng.gauss() * cfg.noise_std) as f32;
            for c in 0..3 {
                frame[px * 3 + c] += n;
            }
        }
        data.extend(frame.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
    }

    let clip = VideoClip::new(cfg.t, fs, fs, Channels::Rgb, cfg.fps, data)?;
    let gt_box = match label {
        Label::Violent => {
            let half = cfg.event_scale / 2.0;
            let cx = plan.center[0] / fs as f64;
            let cy = plan.center[1] / fs as f64;
            Some(RegionBox::new(
                (cx - half).max(0.0),
                (cy - half).max(0.0),
                (cx + half).min(1.0),
                (cy + half).min(1.0),
            )?)
        }
        Label::NonViolent => None,
    };
    Ok(LabeledClip { clip, label, gt_box, seed })
}

fn label_for_index(i: usize) -> Label {
    if i % 2 == 0 {
        Label::Violent
    } else {
        Label::NonViolent
    }
}

fn split_for_index(cfg: &SynthConfig, i: usize) -> Split {
    let per_class = cfg.n_clips / 2;
    let train_per_class = per_class * 4 / 5;
    if i / 2 < train_per_class {
        Split::Train
    } else {
        Split::Test
    }
}

/// Generate all clips in memory, manifest order.
pub fn generate_corpus_clips(cfg: &SynthConfig) -> Result<Vec<LabeledClip>> {
    cfg.validate()?;
    (0..cfg.n_clips)
        .map(|i| generate_clip(cfg, label_for_index(i), cfg.seed.wrapping_add(i as u64)))
        .collect()
}

fn manifest_for(cfg: &SynthConfig, clips: &[LabeledClip]) -> CorpusManifest {
    let entries = clips
        .iter()
        .enumerate()
        .map(|(i, lc)| ManifestEntry {
            file: format!("clips/{i:05}.ssha"),
            label: lc.label,
            split: split_for_index(cfg, i),
            gt_box: lc.gt_box,
            seed: lc.seed,
        })
        .collect();
    CorpusManifest {
        version: MANIFEST_VERSION,
        config: cfg.clone(),
        entries,
    }
}

/// Generate and write a corpus: `clips/NNNNN.ssha` + `clips/NNNNN.json`
/// per clip and a `manifest.json` at the root. Returns the manifest path.
pub fn generate_corpus(cfg: &SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let clip_dir = out_dir.join("clips");
    fs::create_dir_all(&clip_dir)?;
    let mut clips = Vec::with_capacity(cfg.n_clips);
    for i in 0..cfg.n_clips {
        let lc = generate_clip(cfg, label_for_index(i), cfg.seed.wrapping_add(i as u64))?;
        container::write_labeled_clip(&clip_dir.join(format!("{i:05}")), &lc)?;
        clips.push(lc);
    }
    let manifest = manifest_for(cfg, &clips);
    let path = out_dir.join("manifest.json");
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    fs::write(&path, bytes)?;
    Ok(path)
}

/// In-memory corpus without touching disk; same clips and manifest as
/// [`generate_corpus`] would write.
pub fn generate_corpus_mem(cfg: &SynthConfig) -> Result<Corpus> {
    let clips = generate_corpus_clips(cfg)?;
    let manifest = manifest_for(cfg, &clips);
    Ok(Corpus { manifest, clips })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_clips: 10,
            frame_size: 64,
            t: 24,
            seed: 7,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let a = generate_clip(&cfg, Label::Violent, 123).unwrap();
        let b = generate_clip(&cfg, Label::Violent, 123).unwrap();
        assert_eq!(a.clip.data, b.clip.data);
        assert_eq!(a.gt_box, b.gt_box);
        let c = generate_clip(&cfg, Label::Violent, 124).unwrap();
        assert_ne!(a.clip.data, c.clip.data);
    }

    #[test]
    fn gt_box_bounds_and_presence() {
        let cfg = small_cfg();
        for seed in 0..10 {
            let v = generate_clip(&cfg, Label::Violent, seed).unwrap();
            let b = v.gt_box.expect("violent clips carry a gt box");
            assert!(b.width() <= cfg.event_scale + 1e-9);
            assert!(b.height() <= cfg.event_scale + 1e-9);
            let nv = generate_clip(&cfg, Label::NonViolent, seed).unwrap();
            assert!(nv.gt_box.is_none());
        }
    }

    #[test]
    fn violent_pair_reverses_at_least_three_times() {
        let cfg = small_cfg();
        for seed in 0..10 {
            let plan = ClipPlan::build(&cfg, Label::Violent, seed);
            let offsets: Vec<f64> =
                (0..cfg.t).map(|t| plan.pair_offset(&cfg, t)).collect();
            let mut reversals = 0;
            let mut last_dir = 0.0f64;
            for w in offsets.windows(2) {
                let d = w[1] - w[0];
                if d.abs() > 1e-9 {
                    if last_dir != 0.0 && d.signum() != last_dir {
                        reversals += 1;
                    }
                    last_dir = d.signum();
                }
            }
            assert!(reversals >= 3, "seed {seed}: {reversals} reversals");
        }
    }

    #[test]
    fn closest_approach_separates_the_classes() {
        let cfg = small_cfg();
        let fs = cfg.frame_size as f64;
        for seed in 0..10 {
            let v = ClipPlan::build(&cfg, Label::Violent, seed);
            let n = ClipPlan::build(&cfg, Label::NonViolent, seed);
            let sep = |plan: &ClipPlan, reduce: fn(f64, f64) -> f64, init: f64| {
                (0..cfg.t)
                    .map(|t| 2.0 * plan.pair_offset(&cfg, t))
                    .fold(init, reduce)
            };
            let min_v = sep(&v, f64::min, f64::INFINITY);
            let min_n = sep(&n, f64::min, f64::INFINITY);
            assert!(
                min_v < 2.0 * v.pair[0].radius,
                "seed {seed}: violent pair never overlaps ({min_v})"
            );
            assert!(
                min_n > 2.0 * n.pair[0].radius + 0.010 * fs,
                "seed {seed}: nonviolent gap too thin ({min_n})"
            );
            // Identical widest separation, so coarse extent carries no label.
            let max_v = sep(&v, f64::max, f64::NEG_INFINITY);
            let max_n = sep(&n, f64::max, f64::NEG_INFINITY);
            assert!((max_v - max_n).abs() < 1e-9);
        }
    }

    #[test]
    fn pair_stays_inside_gt_box() {
        let cfg = small_cfg();
        for seed in 0..10 {
            let lc = generate_clip(&cfg, Label::Violent, seed).unwrap();
            let gt = lc.gt_box.unwrap();
            let plan = ClipPlan::build(&cfg, Label::Violent, seed);
            let fs = cfg.frame_size as f64;
            for t in 0..cfg.t {
                let (a, b) = plan.pair_positions(&cfg, t);
                for p in [a, b] {
                    let x = p[0] / fs;
                    let y = p[1] / fs;
                    assert!(
                        x >= gt.x0 - 1e-6 && x <= gt.x1 + 1e-6,
                        "seed {seed} t {t}: x {x} outside [{}, {}]",
                        gt.x0,
                        gt.x1
                    );
                    assert!(y >= gt.y0 - 1e-6 && y <= gt.y1 + 1e-6);
                }
            }
        }
    }

    /// Mean absolute inter-frame difference inside a box.
    fn box_energy(clip: &VideoClip<u8>, b: &RegionBox) -> f64 {
        let rect = b.pixel_rect(clip.w, clip.h).unwrap();
        let mut acc = 0.0f64;
        let mut n = 0u64;
        for t in 1..clip.t {
            for y in rect.y0..rect.y1 {
                for x in rect.x0..rect.x1 {
                    for c in 0..3 {
                        let a = clip.data[clip.idx(t, y, x, c)] as f64;
                        let p = clip.data[clip.idx(t - 1, y, x, c)] as f64;
                        acc += (a - p).abs();
                        n += 1;
                    }
                }
            }
        }
        acc / n as f64
    }

    #[test]
    fn event_region_dominates_motion_energy() {
        let cfg = SynthConfig { n_clips: 10, seed: 11, ..SynthConfig::default() };
        let mut rng = Pcg32::new(99, 0);
        let mut ratio_sum = 0.0;
        let clips = 8;
        for seed in 0..clips {
            let lc = generate_clip(&cfg, Label::Violent, seed).unwrap();
            let gt = lc.gt_box.unwrap();
            let e_gt = box_energy(&lc.clip, &gt);
            let side = gt.width().min(gt.height());
            let mut worst: f64 = 0.0;
            let mut tries = 0;
            while tries < 12 {
                let x0 = rng.uniform_in(0.0, 1.0 - side);
                let y0 = rng.uniform_in(0.0, 1.0 - side);
                let cand = RegionBox::new(x0, y0, x0 + side, y0 + side).unwrap();
                if cand.iou(&gt) > 0.0 {
                    continue;
                }
                worst = worst.max(box_energy(&lc.clip, &cand));
                tries += 1;
            }
            ratio_sum += e_gt / worst.max(1e-9);
        }
        let mean_ratio = ratio_sum / clips as f64;
        assert!(
            mean_ratio >= 2.0,
            "event energy only {mean_ratio:.2}x the strongest outside box"
        );
    }

    #[test]
    fn corpus_layout_splits_and_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_clips: 10,
            frame_size: 64,
            t: 12,
            seed: 40,
            ..SynthConfig::default()
        };
        generate_corpus(&cfg, dir.path()).unwrap();
        let corpus = Corpus::load(dir.path()).unwrap();
        assert_eq!(corpus.clips.len(), 10);
        let m = &corpus.manifest;
        assert_eq!(m.version, MANIFEST_VERSION);
        // Alternating labels, per-clip seeds offset by index.
        for (i, e) in m.entries.iter().enumerate() {
            assert_eq!(e.label, label_for_index(i));
            assert_eq!(e.seed, 40 + i as u64);
            assert_eq!(e.gt_box.is_some(), e.label == Label::Violent);
        }
        // 80/20 within each class: 5 per class -> 4 train, 1 test.
        let count = |split, label| {
            m.entries
                .iter()
                .filter(|e| e.split == split && e.label == label)
                .count()
        };
        assert_eq!(count(Split::Train, Label::Violent), 4);
        assert_eq!(count(Split::Test, Label::Violent), 1);
        assert_eq!(count(Split::Train, Label::NonViolent), 4);
        assert_eq!(count(Split::Test, Label::NonViolent), 1);
    }

    #[test]
    fn corpus_files_are_byte_identical_across_runs() {
        let cfg = SynthConfig {
            n_clips: 4,
            frame_size: 48,
            t: 12,
            seed: 5,
            ..SynthConfig::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_corpus(&cfg, d1.path()).unwrap();
        generate_corpus(&cfg, d2.path()).unwrap();
        for name in ["manifest.json", "clips/00000.ssha", "clips/00003.ssha", "clips/00001.json"] {
            let a = fs::read(d1.path().join(name)).unwrap();
            let b = fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.n_clips = 3;
        assert!(cfg.validate().is_err());
        cfg = SynthConfig { event_scale: 0.9, ..SynthConfig::default() };
        assert!(cfg.validate().is_err());
        cfg = SynthConfig { frame_size: 16, ..SynthConfig::default() };
        assert!(cfg.validate().is_err());
        cfg = SynthConfig { event_period: 40, ..SynthConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
