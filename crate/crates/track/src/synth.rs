use std::fs;
use std::path::{Path, PathBuf};

use prl_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{io_err, Result, TrackError};
use crate::patch::Frame;

/// Partial occlusion over a frame range: a flat rectangle covering the given
/// fraction of the target is drawn over its center.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OcclusionSpec {
    pub from: usize,
    pub until: usize,
    pub coverage: f32,
}

/// Recipe for one synthetic sequence. Everything is derived from the seed,
/// so a spec renders to identical frames on every run.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub name: String,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// First-frame target box, x, y, w, h.
    pub start: [f32; 4],
    /// Linear drift in pixels per frame.
    pub velocity: [f32; 2],
    /// Sinusoidal sway amplitude in pixels.
    pub sway: [f32; 2],
    /// Sway period in frames; 0 disables the sinusoid.
    pub sway_period: f32,
    /// Per-frame multiplier on both box sides; 1 keeps the size constant.
    pub size_ramp: f32,
    /// Per-frame multiplier on the box width only, changing the aspect.
    pub aspect_ramp: f32,
    /// Total relative brightness swing across the sequence; 0 disables it.
    pub illumination: f32,
    pub occlusion: Option<OcclusionSpec>,
    /// Number of static distractor rectangles in the background.
    pub clutter: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            name: "sequence".into(),
            frames: 20,
            width: 320,
            height: 240,
            seed: 1,
            start: [40.0, 40.0, 48.0, 36.0],
            velocity: [2.0, 1.0],
            sway: [0.0, 0.0],
            sway_period: 0.0,
            size_ramp: 1.0,
            aspect_ramp: 1.0,
            illumination: 0.0,
            occlusion: None,
            clutter: 6,
        }
    }
}

/// Multi-sequence generation config, the on-disk form being a TOML document
/// with one `[[sequence]]` table per entry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub sequence: Vec<SynthSpec>,
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.width < 32 || self.height < 32 {
            return Err(TrackError::Config(format!(
                "sequence {}: needs at least one frame and a 32x32 frame size",
                self.name
            )));
        }
        let [_, _, w, h] = self.start;
        if !(w >= 4.0 && h >= 4.0 && w <= self.width as f32 && h <= self.height as f32) {
            return Err(TrackError::Config(format!(
                "sequence {}: start box {w}x{h} does not fit the {}x{} frame",
                self.name, self.width, self.height
            )));
        }
        if let Some(occ) = &self.occlusion {
            if !(0.0..=1.0).contains(&occ.coverage) {
                return Err(TrackError::Config(format!(
                    "sequence {}: occlusion coverage {} outside [0, 1]",
                    self.name, occ.coverage
                )));
            }
        }
        Ok(())
    }

    /// Attribute tags implied by the recipe: POC for occlusion, SV for a
    /// size ramp, ARC for an aspect ramp, IV for an illumination swing.
    pub fn attributes(&self) -> Vec<String> {
        let mut tags = Vec::new();
        if self.occlusion.is_some() {
            tags.push("POC".to_string());
        }
        if self.aspect_ramp != 1.0 {
            tags.push("ARC".to_string());
        }
        if self.size_ramp != 1.0 {
            tags.push("SV".to_string());
        }
        if self.illumination != 0.0 {
            tags.push("IV".to_string());
        }
        tags
    }
}

/// A rendered sequence held in memory.
pub struct SynthSequence {
    pub frames: Vec<Frame>,
    pub boxes: Vec<BBox>,
    pub attributes: Vec<String>,
}

/// Random lattice interpolated bilinearly over the full frame, one value
/// per pixel in [lo, hi].
fn value_noise<R: Rng>(rng: &mut R, w: usize, h: usize, cells: usize, lo: f32, hi: f32) -> Vec<f32> {
    let n = cells + 1;
    let lattice: Vec<f32> = (0..n * n).map(|_| rng.gen_range(lo..hi)).collect();
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        let fy = y as f32 / h as f32 * cells as f32;
        let y0 = fy as usize;
        let dy = fy - y0 as f32;
        for x in 0..w {
            let fx = x as f32 / w as f32 * cells as f32;
            let x0 = fx as usize;
            let dx = fx - x0 as f32;
            let at = |r: usize, c: usize| lattice[r * n + c];
            let top = at(y0, x0) + (at(y0, x0 + 1) - at(y0, x0)) * dx;
            let bot = at(y0 + 1, x0) + (at(y0 + 1, x0 + 1) - at(y0 + 1, x0)) * dx;
            out[y * w + x] = top + (bot - top) * dy;
        }
    }
    out
}

struct Scenery {
    /// Static background, [3, h, w] layout.
    background: Vec<f32>,
    /// Object texture lattice per channel, `TEX` by `TEX`.
    texture: [Vec<f32>; 3],
}

const TEX: usize = 6;

fn build_scenery(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Scenery {
    let (w, h) = (spec.width, spec.height);
    let mut background = Vec::with_capacity(3 * w * h);
    for _ in 0..3 {
        background.extend(value_noise(rng, w, h, 8, 0.1, 0.45));
    }
    for _ in 0..spec.clutter {
        let cw = rng.gen_range(8..(w / 4).max(9));
        let ch = rng.gen_range(8..(h / 4).max(9));
        let cx = rng.gen_range(0..w - cw);
        let cy = rng.gen_range(0..h - ch);
        let color: [f32; 3] = [
            rng.gen_range(0.0..0.6),
            rng.gen_range(0.0..0.6),
            rng.gen_range(0.0..0.6),
        ];
        for ch_i in 0..3 {
            let plane = &mut background[ch_i * w * h..(ch_i + 1) * w * h];
            for y in cy..cy + ch {
                for x in cx..cx + cw {
                    plane[y * w + x] = color[ch_i];
                }
            }
        }
    }
    let mut texture = [vec![], vec![], vec![]];
    for t in &mut texture {
        *t = (0..TEX * TEX).map(|_| rng.gen_range(0.55..1.0)).collect();
    }
    Scenery {
        background,
        texture,
    }
}

/// Samples the object texture at normalized coordinates in [0, 1].
fn sample_texture(tex: &[f32], u: f32, v: f32) -> f32 {
    let fu = u.clamp(0.0, 1.0) * (TEX - 1) as f32;
    let fv = v.clamp(0.0, 1.0) * (TEX - 1) as f32;
    let (u0, v0) = (fu as usize, fv as usize);
    let (u1, v1) = ((u0 + 1).min(TEX - 1), (v0 + 1).min(TEX - 1));
    let (du, dv) = (fu - u0 as f32, fv - v0 as f32);
    let at = |r: usize, c: usize| tex[r * TEX + c];
    let top = at(v0, u0) + (at(v0, u1) - at(v0, u0)) * du;
    let bot = at(v1, u0) + (at(v1, u1) - at(v1, u0)) * du;
    top + (bot - top) * dv
}

/// Target box at frame `t` before boundary clamping: linear drift plus
/// optional sway, with geometric size and aspect ramps.
fn box_at(spec: &SynthSpec, t: usize) -> BBox {
    let [x0, y0, w0, h0] = spec.start;
    let ft = t as f32;
    let (mut cx, mut cy) = (x0 + w0 / 2.0, y0 + h0 / 2.0);
    cx += spec.velocity[0] * ft;
    cy += spec.velocity[1] * ft;
    if spec.sway_period > 0.0 {
        let phase = 2.0 * std::f32::consts::PI * ft / spec.sway_period;
        cx += spec.sway[0] * phase.sin();
        cy += spec.sway[1] * phase.sin();
    }
    let scale = spec.size_ramp.powi(t as i32);
    let aspect = spec.aspect_ramp.powi(t as i32);
    let w = (w0 * scale * aspect).max(4.0);
    let h = (h0 * scale).max(4.0);
    BBox::from_center(cx, cy, w, h)
}

/// Clamps a box fully inside the frame, shrinking it first if it is larger
/// than the frame.
fn clamp_inside(b: BBox, fw: f32, fh: f32) -> BBox {
    let w = b.w.min(fw);
    let h = b.h.min(fh);
    let x = b.x.clamp(0.0, fw - w);
    let y = b.y.clamp(0.0, fh - h);
    BBox::new(x, y, w, h)
}

/// Renders a spec to frames and ground truth.
pub fn render(spec: &SynthSpec) -> Result<SynthSequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scenery = build_scenery(spec, &mut rng);
    let (w, h) = (spec.width, spec.height);
    let (fw, fh) = (w as f32, h as f32);
    let plane = w * h;

    let mut frames = Vec::with_capacity(spec.frames);
    let mut boxes = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let bbox = clamp_inside(box_at(spec, t), fw, fh);
        let mut data = scenery.background.clone();

        let (x1, y1) = (bbox.x, bbox.y);
        let px_lo = x1.floor().max(0.0) as usize;
        let py_lo = y1.floor().max(0.0) as usize;
        let px_hi = ((x1 + bbox.w).ceil() as usize).min(w);
        let py_hi = ((y1 + bbox.h).ceil() as usize).min(h);
        for y in py_lo..py_hi {
            for x in px_lo..px_hi {
                let u = (x as f32 + 0.5 - x1) / bbox.w;
                let v = (y as f32 + 0.5 - y1) / bbox.h;
                if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
                    continue;
                }
                for c in 0..3 {
                    data[c * plane + y * w + x] = sample_texture(&scenery.texture[c], u, v);
                }
            }
        }

        if let Some(occ) = &spec.occlusion {
            if (occ.from..occ.until).contains(&t) && occ.coverage > 0.0 {
                let side = occ.coverage.sqrt();
                let (ow, oh) = (bbox.w * side, bbox.h * side);
                let (ocx, ocy) = bbox.center();
                let ox_lo = (ocx - ow / 2.0).round().max(0.0) as usize;
                let oy_lo = (ocy - oh / 2.0).round().max(0.0) as usize;
                let ox_hi = ((ocx + ow / 2.0).round() as usize).min(w);
                let oy_hi = ((ocy + oh / 2.0).round() as usize).min(h);
                for y in oy_lo..oy_hi {
                    for x in ox_lo..ox_hi {
                        for c in 0..3 {
                            data[c * plane + y * w + x] = 0.2;
                        }
                    }
                }
            }
        }

        if spec.illumination != 0.0 && spec.frames > 1 {
            let ramp = t as f32 / (spec.frames - 1) as f32;
            let gain = 1.0 + spec.illumination * ramp;
            for v in &mut data {
                *v = (*v * gain).clamp(0.0, 1.0);
            }
        }

        frames.push(Frame::new(Tensor::from_vec(&[3, h, w], data)?)?);
        boxes.push(bbox);
    }
    Ok(SynthSequence {
        frames,
        boxes,
        attributes: spec.attributes(),
    })
}

/// Renders and writes a sequence in the benchmark directory layout,
/// returning the sequence directory.
pub fn write_sequence(root: &Path, spec: &SynthSpec) -> Result<PathBuf> {
    let rendered = render(spec)?;
    let dir = root.join(&spec.name);
    let img = dir.join("img");
    fs::create_dir_all(&img).map_err(|e| io_err(&img, e))?;
    for (i, frame) in rendered.frames.iter().enumerate() {
        let (w, h) = (frame.width(), frame.height());
        let plane = w * h;
        let data = frame.pixels().as_slice();
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for (n, px) in buf.pixels_mut().enumerate() {
            for c in 0..3 {
                px.0[c] = (data[c * plane + n].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        let path = img.join(format!("{i:04}.png"));
        buf.save(&path).map_err(|e| {
            TrackError::Data(format!("cannot write {}: {e}", path.display()))
        })?;
    }
    crate::dataset::write_boxes(&dir.join("groundtruth_rect.txt"), &rendered.boxes)?;
    let att_path = dir.join("att.txt");
    fs::write(&att_path, rendered.attributes.join(",") + "\n")
        .map_err(|e| io_err(&att_path, e))?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthSpec {
        SynthSpec {
            name: "test".into(),
            frames: 6,
            width: 96,
            height: 72,
            seed: 42,
            start: [12.0, 10.0, 20.0, 16.0],
            velocity: [3.0, 2.0],
            ..SynthSpec::default()
        }
    }

    #[test]
    fn rendering_is_deterministic_down_to_the_bits() {
        let a = render(&spec()).unwrap();
        let b = render(&spec()).unwrap();
        assert_eq!(a.frames.len(), b.frames.len());
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert!(fa.pixels().bitwise_eq(fb.pixels()));
        }
        assert_eq!(a.boxes, b.boxes);

        let mut other = spec();
        other.seed = 43;
        let c = render(&other).unwrap();
        assert!(!a.frames[0].pixels().bitwise_eq(c.frames[0].pixels()));
    }

    #[test]
    fn constant_specs_keep_the_box_fixed() {
        let mut s = spec();
        s.velocity = [0.0, 0.0];
        s.sway = [0.0, 0.0];
        let seq = render(&s).unwrap();
        for b in &seq.boxes {
            assert_eq!(*b, seq.boxes[0]);
        }
        for (fa, fb) in seq.frames.iter().zip(&seq.frames[1..]) {
            assert!(fa.pixels().bitwise_eq(fb.pixels()));
        }
    }

    #[test]
    fn boxes_always_stay_inside_the_frame() {
        let mut s = spec();
        s.frames = 40;
        s.velocity = [6.0, 5.0];
        s.size_ramp = 1.04;
        let seq = render(&s).unwrap();
        for b in &seq.boxes {
            assert!(b.x >= 0.0 && b.y >= 0.0);
            assert!(b.x + b.w <= 96.0);
            assert!(b.y + b.h <= 72.0);
            assert!(b.w >= 4.0 && b.h >= 4.0);
        }
        let last = seq.boxes.last().unwrap();
        assert!(last.w > seq.boxes[0].w);
    }

    #[test]
    fn attribute_tags_follow_the_recipe() {
        assert!(spec().attributes().is_empty());
        let mut s = spec();
        s.occlusion = Some(OcclusionSpec {
            from: 2,
            until: 4,
            coverage: 0.4,
        });
        s.size_ramp = 1.02;
        assert_eq!(s.attributes(), vec!["POC".to_string(), "SV".to_string()]);
        let mut s = spec();
        s.aspect_ramp = 0.98;
        s.illumination = 0.5;
        assert_eq!(s.attributes(), vec!["ARC".to_string(), "IV".to_string()]);
    }

    #[test]
    fn occlusion_flattens_the_target_center() {
        let mut s = spec();
        s.velocity = [0.0, 0.0];
        s.occlusion = Some(OcclusionSpec {
            from: 1,
            until: 2,
            coverage: 0.5,
        });
        let seq = render(&s).unwrap();
        let b = seq.boxes[1];
        let (cx, cy) = b.center();
        let (x, y) = (cx as usize, cy as usize);
        let w = seq.frames[1].width();
        let covered = seq.frames[1].pixels().as_slice()[y * w + x];
        let clear = seq.frames[0].pixels().as_slice()[y * w + x];
        assert_eq!(covered, 0.2);
        assert_ne!(covered, clear);
    }

    #[test]
    fn specs_round_trip_through_toml() {
        let config = SynthConfig {
            sequence: vec![spec(), {
                let mut s = spec();
                s.name = "second".into();
                s.illumination = 0.4;
                s
            }],
        };
        let text = toml::to_string(&config).unwrap();
        assert!(text.contains("[[sequence]]"));
        let back: SynthConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.sequence.len(), 2);
        assert_eq!(back.sequence[1].name, "second");
        assert_eq!(back.sequence[1].illumination, 0.4);

        let partial: SynthConfig = toml::from_str(
            "[[sequence]]\nname = \"tiny\"\nframes = 3\nseed = 7\n",
        )
        .unwrap();
        assert_eq!(partial.sequence[0].frames, 3);
        assert_eq!(partial.sequence[0].width, 320);
    }

    #[test]
    fn written_sequences_load_back_as_a_benchmark() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec();
        s.illumination = 0.3;
        let seq_dir = write_sequence(dir.path(), &s).unwrap();
        assert!(seq_dir.ends_with("test"));

        let loaded = crate::dataset::Sequence::load(&seq_dir).unwrap();
        assert_eq!(loaded.len(), 6);
        assert_eq!(loaded.attributes, vec!["IV".to_string()]);
        let frame = loaded.load_frame(0).unwrap();
        assert_eq!((frame.width(), frame.height()), (96, 72));

        let rendered = render(&s).unwrap();
        for (a, b) in loaded.boxes.iter().zip(&rendered.boxes) {
            assert_eq!(a.x.to_bits(), b.x.to_bits());
            assert_eq!(a.w.to_bits(), b.w.to_bits());
        }

        let before = fs::read(seq_dir.join("img/0003.png")).unwrap();
        write_sequence(dir.path(), &s).unwrap();
        let after = fs::read(seq_dir.join("img/0003.png")).unwrap();
        assert_eq!(before, after);
    }
}
