//! Synthetic depth pop-out videos.
//!
//! Every clip shows several moving squares of one color. Exactly one of them
//! (the target) lies on a near depth plane; viewers fixate only that one.
//! Depth maps store inverse depth, so nearer surfaces are brighter.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::manifest::{format_manifest, frame_file, write_fixations, FixationPoint, FixationSet, Split, VideoRecord};
use crate::error::{Error, Result};

pub const BACKGROUND_RGB: [u8; 3] = [40, 40, 40];
pub const SQUARE_RGB: [u8; 3] = [200, 60, 60];
pub const BACKGROUND_DEPTH: u16 = 6_000;
pub const DISTRACTOR_DEPTH: u16 = 12_000;
pub const TARGET_DEPTH: u16 = 50_000;

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub clips: usize,
    pub seed: u64,
    pub frames: usize,
    pub size: u32,
    pub square: u32,
    pub distractors: usize,
    pub viewers: usize,
    /// Every `k`-th clip (1-based) goes to the test split; `None` keeps all in train.
    pub holdout_every: Option<usize>,
    pub split: Split,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            clips: 8,
            seed: 0,
            frames: 32,
            size: 112,
            square: 16,
            distractors: 4,
            viewers: 8,
            holdout_every: None,
            split: Split::Train,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Square {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
}

impl Square {
    fn random(rng: &mut ChaCha8Rng, span: f64) -> Square {
        let speed = |rng: &mut ChaCha8Rng| {
            let v = rng.random_range(1.0..3.0);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        };
        Square { x: rng.random_range(0.0..span), y: rng.random_range(0.0..span), vx: speed(rng), vy: speed(rng) }
    }

    fn step(&mut self, span: f64) {
        for (p, v) in [(&mut self.x, &mut self.vx), (&mut self.y, &mut self.vy)] {
            *p += *v;
            if *p < 0.0 {
                *p = -*p;
                *v = -*v;
            } else if *p > span {
                *p = 2.0 * span - *p;
                *v = -*v;
            }
        }
    }

    /// Integer pixel origin of the square.
    fn origin(&self) -> (u32, u32) {
        (self.x.round() as u32, self.y.round() as u32)
    }
}

/// Per-frame state of one generated clip, kept for inspection in tests.
#[derive(Clone, Debug)]
pub struct ClipLayout {
    /// Target square origin `(x, y)` per frame.
    pub target: Vec<(u32, u32)>,
    pub distractors: Vec<Vec<(u32, u32)>>,
}

/// Write `opts.clips` clips plus `manifest.tsv` under `out` and return the records.
pub fn synth_depth_popout(out: &Path, opts: &SynthOptions) -> Result<Vec<VideoRecord>> {
    if opts.clips == 0 {
        return Err(Error::Input("number of clips must be at least 1".into()));
    }
    if opts.square == 0 || opts.square >= opts.size || opts.frames == 0 || opts.viewers == 0 {
        return Err(Error::Input("synthetic geometry needs 0 < square < size, frames ≥ 1 and viewers ≥ 1".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut records = Vec::with_capacity(opts.clips);
    for clip in 0..opts.clips {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(clip as u64 + 1);
        let dir = out.join(format!("clip_{clip:04}"));
        let layout = layout(&mut rng, opts);
        write_clip(&dir, &layout, &mut rng, opts)?;
        let split = match opts.holdout_every {
            Some(k) if k > 0 && (clip + 1) % k == 0 => Split::Test,
            _ => opts.split,
        };
        records.push(VideoRecord {
            video_id: format!("clip_{clip:04}"),
            frames_dir: dir.join("frames"),
            depth_dir: Some(dir.join("depth")),
            fixations_file: dir.join("fixations.csv"),
            width: opts.size,
            height: opts.size,
            split,
        });
    }
    let manifest = out.join(MANIFEST_NAME);
    fs::write(&manifest, format_manifest(&records, out)).map_err(|e| Error::io(&manifest, e))?;
    Ok(records)
}

pub fn manifest_path(out: &Path) -> PathBuf {
    out.join(MANIFEST_NAME)
}

fn layout(rng: &mut ChaCha8Rng, opts: &SynthOptions) -> ClipLayout {
    let span = (opts.size - opts.square) as f64;
    let mut squares: Vec<Square> = (0..=opts.distractors).map(|_| Square::random(rng, span)).collect();
    let mut target = Vec::with_capacity(opts.frames);
    let mut distractors = Vec::with_capacity(opts.frames);
    for _ in 0..opts.frames {
        target.push(squares[0].origin());
        distractors.push(squares[1..].iter().map(Square::origin).collect());
        for s in &mut squares {
            s.step(span);
        }
    }
    ClipLayout { target, distractors }
}

fn write_clip(dir: &Path, layout: &ClipLayout, rng: &mut ChaCha8Rng, opts: &SynthOptions) -> Result<()> {
    let frames_dir = dir.join("frames");
    let depth_dir = dir.join("depth");
    for d in [&frames_dir, &depth_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let (size, sq) = (opts.size, opts.square);
    let inside = |(ox, oy): (u32, u32), x: u32, y: u32| x >= ox && x < ox + sq && y >= oy && y < oy + sq;
    let mut fixations = Vec::with_capacity(opts.frames);
    for f in 0..opts.frames {
        let target = layout.target[f];
        let others = &layout.distractors[f];
        let rgb = ImageBuffer::from_fn(size, size, |x, y| {
            if inside(target, x, y) || others.iter().any(|&o| inside(o, x, y)) {
                Rgb(SQUARE_RGB)
            } else {
                Rgb(BACKGROUND_RGB)
            }
        });
        let depth = ImageBuffer::from_fn(size, size, |x, y| {
            if inside(target, x, y) {
                Luma([TARGET_DEPTH])
            } else if others.iter().any(|&o| inside(o, x, y)) {
                Luma([DISTRACTOR_DEPTH])
            } else {
                Luma([BACKGROUND_DEPTH])
            }
        });
        save(&rgb, &frame_file(&frames_dir, f))?;
        save(&depth, &frame_file(&depth_dir, f))?;
        let points = (0..opts.viewers)
            .map(|v| FixationPoint {
                x: target.0 as f64 + rng.random_range(0.0..sq as f64),
                y: target.1 as f64 + rng.random_range(0.0..sq as f64),
                viewer_id: v as u32,
            })
            .collect();
        fixations.push(FixationSet { frame_index: f, points });
    }
    write_fixations(&dir.join("fixations.csv"), &fixations)
}

fn save<P>(img: &ImageBuffer<P, Vec<P::Subpixel>>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
{
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image { path: path.to_path_buf(), message: other.to_string() },
    })
}
