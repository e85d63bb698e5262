//! PPM image export: annotated trace frames with the attention box and a
//! caption strip, and a color-wheel rendering for flow fields.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::clip::{Channels, VideoClip};
use crate::env::Action;
use crate::error::{Error, Result};
use crate::eval::StepRecord;
use crate::synth::Corpus;

/// Plain RGB8 raster.
#[derive(Debug, Clone)]
pub struct Image {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(w: usize, h: usize) -> Image {
        Image { w, h, data: vec![0; w * h * 3] }
    }

    /// Set one pixel; coordinates outside the raster are ignored.
    pub fn put(&mut self, x: isize, y: isize, rgb: [u8; 3]) {
        if x < 0 || y < 0 || x as usize >= self.w || y as usize >= self.h {
            return;
        }
        let i = (y as usize * self.w + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Binary P6 with maxval 255.
    pub fn write_ppm(&self, w: &mut dyn Write) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.w, self.h)?;
        w.write_all(&self.data)?;
        Ok(())
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        self.write_ppm(&mut f)
    }
}

/// Copy one frame out of an RGB clip.
pub fn frame_to_image(clip: &VideoClip<u8>, t: usize) -> Result<Image> {
    if t >= clip.t {
        return Err(Error::ShapeMismatch(format!("frame {t} of {}", clip.t)));
    }
    if clip.channels != Channels::Rgb {
        return Err(Error::Config("flow clips render via flow_to_image".into()));
    }
    let mut img = Image::new(clip.w, clip.h);
    img.data.copy_from_slice(clip.frame(t));
    Ok(img)
}

/// Draw a rectangle border of the given thickness, edges inside the rect.
pub fn draw_box(
    img: &mut Image,
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    thickness: usize,
    rgb: [u8; 3],
) {
    for t in 0..thickness {
        for x in x0..=x1 {
            img.put(x as isize, (y0 + t) as isize, rgb);
            img.put(x as isize, y1 as isize - t as isize, rgb);
        }
        for y in y0..=y1 {
            img.put((x0 + t) as isize, y as isize, rgb);
            img.put(x1 as isize - t as isize, y as isize, rgb);
        }
    }
}

/// 3x5 glyphs, three bits per row from the top; enough charset for the
/// caption strips.
const GLYPHS: &[(char, u16)] = &[
    ('0', 0b111_101_101_101_111),
    ('1', 0b010_110_010_010_111),
    ('2', 0b111_001_111_100_111),
    ('3', 0b111_001_111_001_111),
    ('4', 0b101_101_111_001_001),
    ('5', 0b111_100_111_001_111),
    ('6', 0b111_100_111_101_111),
    ('7', 0b111_001_001_010_010),
    ('8', 0b111_101_111_101_111),
    ('9', 0b111_101_111_001_111),
    ('E', 0b111_100_111_100_111),
    ('G', 0b111_100_101_101_111),
    ('I', 0b111_010_010_010_111),
    ('L', 0b100_100_100_100_111),
    ('N', 0b101_111_111_101_101),
    ('O', 0b111_101_101_101_111),
    ('R', 0b111_101_111_110_101),
    ('S', 0b111_100_111_001_111),
    ('T', 0b111_010_010_010_010),
    ('V', 0b101_101_101_101_010),
    (' ', 0b000_000_000_000_000),
];

const GLYPH_FALLBACK: u16 = 0b010_101_010_101_010;

fn glyph(c: char) -> u16 {
    GLYPHS
        .iter()
        .find(|(g, _)| *g == c.to_ascii_uppercase())
        .map_or(GLYPH_FALLBACK, |(_, bits)| *bits)
}

/// Render text at integer scale; returns the pixel width consumed.
pub fn draw_text(img: &mut Image, x: usize, y: usize, text: &str, scale: usize, rgb: [u8; 3]) -> usize {
    let mut cx = x;
    for c in text.chars() {
        let bits = glyph(c);
        for row in 0..5 {
            for col in 0..3 {
                if bits >> ((4 - row) * 3 + (2 - col)) & 1 == 1 {
                    for dy in 0..scale {
                        for dx in 0..scale {
                            img.put(
                                (cx + col * scale + dx) as isize,
                                (y + row * scale + dy) as isize,
                                rgb,
                            );
                        }
                    }
                }
            }
        }
        cx += 4 * scale;
    }
    cx - x
}

/// Dark corner strip with a caption.
pub fn draw_strip(img: &mut Image, text: &str) {
    let scale = (img.w / 120).clamp(1, 4);
    let pad = 2 * scale;
    let w = (text.chars().count() * 4 * scale + 2 * pad).min(img.w);
    let h = 5 * scale + 2 * pad;
    for y in 0..h.min(img.h) {
        for x in 0..w {
            img.put(x as isize, y as isize, [20, 20, 20]);
        }
    }
    draw_text(img, pad, pad, text, scale, [240, 240, 240]);
}

/// Hue wheel for one flow field: direction picks the color, magnitude the
/// brightness, normalized to the largest vector in the frame.
pub fn flow_to_image(flow: &VideoClip<f32>, t: usize) -> Result<Image> {
    if flow.channels != Channels::Flow {
        return Err(Error::Config(format!("expected a flow clip, got {:?}", flow.channels)));
    }
    if t >= flow.t {
        return Err(Error::ShapeMismatch(format!("field {t} of {}", flow.t)));
    }
    let mut img = Image::new(flow.w, flow.h);
    let frame = flow.frame(t);
    let mut max_mag = 0.0f64;
    for px in frame.chunks_exact(2) {
        let mag = (px[0] as f64).hypot(px[1] as f64);
        max_mag = max_mag.max(mag);
    }
    if max_mag < 1e-12 {
        return Ok(img);
    }
    for (dst, px) in img.data.chunks_exact_mut(3).zip(frame.chunks_exact(2)) {
        let (u, v) = (px[0] as f64, px[1] as f64);
        let mag = u.hypot(v) / max_mag;
        let angle = v.atan2(u);
        let hue = (angle / std::f64::consts::TAU + 1.0).fract() * 6.0;
        let sector = hue as usize % 6;
        let f = hue.fract();
        let (r, g, b) = match sector {
            0 => (1.0, f, 0.0),
            1 => (1.0 - f, 1.0, 0.0),
            2 => (0.0, 1.0, f),
            3 => (0.0, 1.0 - f, 1.0),
            4 => (f, 0.0, 1.0),
            _ => (1.0, 0.0, 1.0 - f),
        };
        dst[0] = (r * mag * 255.0).round() as u8;
        dst[1] = (g * mag * 255.0).round() as u8;
        dst[2] = (b * mag * 255.0).round() as u8;
    }
    Ok(img)
}

fn action_caption(step: usize, action: &Action) -> String {
    match action {
        Action::Region { index } => format!("S{step} REGION {index}"),
        Action::Classify { class } => format!("S{step} {}", format!("{class:?}").to_ascii_uppercase()),
    }
}

/// Render one trace record: the middle source frame with the pre-action
/// attention box and a caption strip.
pub fn render_step(record: &StepRecord, corpus: &Corpus) -> Result<Image> {
    let clip = corpus
        .clips
        .get(record.clip)
        .ok_or_else(|| Error::Config(format!("trace references missing clip {}", record.clip)))?;
    let src = &clip.clip;
    let mut img = frame_to_image(src, src.t / 2)?;
    let rect = record.r#box.pixel_rect(src.w, src.h)?;
    draw_box(
        &mut img,
        rect.x0,
        rect.y0,
        rect.x0 + rect.width() - 1,
        rect.y0 + rect.height() - 1,
        2,
        [255, 60, 40],
    );
    draw_strip(&mut img, &action_caption(record.step, &record.action));
    Ok(img)
}

/// Write one PPM per trace record into `out_dir`; returns the paths in
/// record order.
pub fn annotate_trace(
    records: &[StepRecord],
    corpus: &Corpus,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut paths = Vec::with_capacity(records.len());
    for r in records {
        let img = render_step(r, corpus)?;
        let path = out_dir.join(format!("ep{:04}_step{}.ppm", r.episode, r.step));
        img.save_ppm(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip::Label;
    use crate::geom::RegionBox;
    use crate::synth::{generate_corpus_mem, SynthConfig};

    fn tiny_corpus() -> Corpus {
        let cfg = SynthConfig {
            n_clips: 2,
            frame_size: 48,
            t: 12,
            sprites: 4,
            seed: 13,
            ..SynthConfig::default()
        };
        generate_corpus_mem(&cfg).unwrap()
    }

    #[test]
    fn ppm_layout_is_p6_with_payload() {
        let mut img = Image::new(2, 3);
        img.put(1, 2, [9, 8, 7]);
        let mut buf = Vec::new();
        img.write_ppm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P6\n2 3\n255\n"));
        assert_eq!(buf.len(), 11 + 18);
        assert_eq!(&buf[buf.len() - 3..], &[9, 8, 7]);
    }

    #[test]
    fn out_of_bounds_puts_are_ignored() {
        let mut img = Image::new(4, 4);
        img.put(-1, 0, [255, 0, 0]);
        img.put(0, 99, [255, 0, 0]);
        assert!(img.data.iter().all(|&b| b == 0));
    }

    #[test]
    fn box_border_is_two_pixels_thick() {
        let mut img = Image::new(20, 20);
        draw_box(&mut img, 0, 0, 19, 19, 2, [255, 0, 0]);
        let red = |x: usize, y: usize| img.data[(y * 20 + x) * 3] == 255;
        for i in 0..20 {
            assert!(red(i, 0) && red(i, 1) && red(i, 18) && red(i, 19));
            assert!(red(0, i) && red(1, i) && red(18, i) && red(19, i));
        }
        assert!(!red(10, 10));
        assert!(!red(2, 2));
    }

    #[test]
    fn glyph_one_renders_expected_pixels() {
        let mut img = Image::new(8, 8);
        draw_text(&mut img, 0, 0, "1", 1, [255, 255, 255]);
        let lit = |x: usize, y: usize| img.data[(y * 8 + x) * 3] == 255;
        assert!(lit(1, 0), "row 0 center");
        assert!(lit(0, 1) && lit(1, 1) && !lit(2, 1), "row 1");
        assert!(lit(0, 4) && lit(1, 4) && lit(2, 4), "base row");
        assert!(!lit(0, 0) && !lit(2, 0));
    }

    #[test]
    fn flow_wheel_separates_directions_and_zero() {
        let mut flow = VideoClip::zeros(1, 4, 4, Channels::Flow, 24.0).unwrap();
        let img = flow_to_image(&flow, 0).unwrap();
        assert!(img.data.iter().all(|&b| b == 0), "zero flow is black");

        for px in flow.data.chunks_exact_mut(2) {
            px[0] = 1.0;
            px[1] = 0.0;
        }
        let right = flow_to_image(&flow, 0).unwrap();
        let first = &right.data[..3];
        assert!(right.data.chunks_exact(3).all(|p| p == first), "uniform flow, uniform color");
        assert!(first.iter().any(|&b| b > 0));

        for px in flow.data.chunks_exact_mut(2) {
            px[0] = -1.0;
        }
        let left = flow_to_image(&flow, 0).unwrap();
        assert_ne!(&left.data[..3], first, "opposite directions get different hues");

        let rgb = VideoClip::<f32>::zeros(1, 4, 4, Channels::Rgb, 24.0).unwrap();
        assert!(flow_to_image(&rgb, 0).is_err());
    }

    #[test]
    fn trace_rendering_matches_box_composition() {
        let corpus = tiny_corpus();
        let prior = RegionBox::new(0.0, 0.0, 0.6, 0.6).unwrap();
        let composed = RegionBox::IDENTITY.compose(&prior);
        let records = vec![
            StepRecord {
                episode: 0,
                step: 0,
                action: Action::Region { index: 0 },
                reward: 0.5,
                r#box: RegionBox::IDENTITY,
                q_values: vec![0.0; 7],
                clip: 0,
            },
            StepRecord {
                episode: 0,
                step: 1,
                action: Action::Classify { class: Label::Violent },
                reward: 1.0,
                r#box: composed,
                q_values: vec![0.0; 7],
                clip: 1,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let paths = annotate_trace(&records, &corpus, dir.path()).unwrap();
        assert_eq!(paths.len(), records.len());
        assert!(paths.iter().all(|p| p.exists()));

        let img = render_step(&records[1], &corpus).unwrap();
        let src = &corpus.clips[1].clip;
        let rect = composed.pixel_rect(src.w, src.h).unwrap();
        let red = |x: usize, y: usize| {
            let i = (y * img.w + x) * 3;
            img.data[i] == 255 && img.data[i + 1] == 60
        };
        let (x1, y1) = (rect.x0 + rect.width() - 1, rect.y0 + rect.height() - 1);
        assert!(red(rect.x0 + rect.width() / 2, y1));
        assert!(red(x1, rect.y0 + rect.height() / 2));

        let bad = vec![StepRecord { clip: 99, ..records[0].clone() }];
        assert!(annotate_trace(&bad, &corpus, dir.path()).is_err());
    }
}
