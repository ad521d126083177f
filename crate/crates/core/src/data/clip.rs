//! Sliding-window clip loading and augmentation.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, Rgb};
use rand::Rng;

use crate::data::ground_truth::{build_ground_truth, GroundTruth, DEFAULT_SIGMA_FRACTION};
use crate::data::manifest::{frame_file, Video};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const WINDOW: usize = 16;
pub const INPUT_SIZE: usize = 112;

/// Window slots before the center frame; the center occupies slot 8.
pub const WINDOW_LEAD: usize = WINDOW / 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipOptions {
    pub size: usize,
    pub mean: f64,
    pub std: f64,
    pub sigma_fraction: f64,
    pub load_depth: bool,
}

impl Default for ClipOptions {
    fn default() -> Self {
        ClipOptions { size: INPUT_SIZE, mean: 0.45, std: 0.225, sigma_fraction: DEFAULT_SIGMA_FRACTION, load_depth: true }
    }
}

impl ClipOptions {
    pub fn sigma(&self) -> f64 {
        self.sigma_fraction * self.size as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample<S> {
    /// `[3, 16, size, size]`.
    pub rgb: Tensor<S>,
    /// `[3, 16, size, size]`, one depth channel replicated.
    pub depth: Option<Tensor<S>>,
    pub gt: GroundTruth<S>,
    pub center_frame: usize,
    pub video_id: String,
}

/// Source frame indices for the window around `center`, clamped to the video.
pub fn window_indices(center: usize, frame_count: usize) -> [usize; WINDOW] {
    let mut out = [0; WINDOW];
    for (slot, o) in out.iter_mut().enumerate() {
        let i = center as isize + slot as isize - WINDOW_LEAD as isize;
        *o = i.clamp(0, frame_count as isize - 1) as usize;
    }
    out
}

pub fn load_clip<S: Scalar>(video: &Video, center: usize, opts: &ClipOptions) -> Result<ClipSample<S>> {
    if center >= video.frame_count {
        return Err(Error::Input(format!(
            "{}: center frame {center} out of range for {} frames",
            video.id(),
            video.frame_count
        )));
    }
    let rec = &video.record;
    let indices = window_indices(center, video.frame_count);
    let plane = opts.size * opts.size;
    let frame_len = WINDOW * plane;

    let mut rgb = Tensor::zeros(&[3, WINDOW, opts.size, opts.size]);
    for (t, &idx) in indices.iter().enumerate() {
        let frame = read_rgb(&frame_file(&rec.frames_dir, idx), opts.size)?;
        let data = rgb.data_mut();
        for (p, px) in frame.pixels().enumerate() {
            for ch in 0..3 {
                data[ch * frame_len + t * plane + p] = S::of(normalize(px[ch] as f64, opts));
            }
        }
    }

    let depth = if opts.load_depth {
        let dir = rec
            .depth_dir
            .as_ref()
            .ok_or_else(|| Error::Input(format!("{}: depth maps required but the manifest lists none", rec.video_id)))?;
        let mut depth = Tensor::zeros(&[3, WINDOW, opts.size, opts.size]);
        for (t, &idx) in indices.iter().enumerate() {
            let frame = read_depth(&frame_file(dir, idx), opts.size)?;
            let data = depth.data_mut();
            for (p, px) in frame.pixels().enumerate() {
                let v = S::of(normalize(px[0] as f64, opts));
                for ch in 0..3 {
                    data[ch * frame_len + t * plane + p] = v;
                }
            }
        }
        Some(depth)
    } else {
        None
    };

    let gt = build_ground_truth(&video.fixations_at(center), (rec.width, rec.height), (opts.size, opts.size), opts.sigma())?;
    Ok(ClipSample { rgb, depth, gt, center_frame: center, video_id: rec.video_id.clone() })
}

fn normalize(v: f64, opts: &ClipOptions) -> f64 {
    (v - opts.mean) / opts.std
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory(&bytes).map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
}

/// RGB in [0, 1], resized to `size`×`size`.
fn read_rgb(path: &Path, size: usize) -> Result<ImageBuffer<Rgb<f32>, Vec<f32>>> {
    let img = decode(path)?.to_rgb32f();
    Ok(resize(img, size))
}

/// Depth min-max rescaled to [0, 1] per frame, resized to `size`×`size`.
fn read_depth(path: &Path, size: usize) -> Result<ImageBuffer<Luma<f32>, Vec<f32>>> {
    let raw = decode(path)?.into_luma16();
    let (lo, hi) = raw.pixels().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let v = p[0] as f64;
        (lo.min(v), hi.max(v))
    });
    let range = hi - lo;
    let scaled = ImageBuffer::from_fn(raw.width(), raw.height(), |x, y| {
        let v = raw.get_pixel(x, y)[0] as f64;
        Luma([if range > 0.0 { ((v - lo) / range) as f32 } else { 0.0 }])
    });
    Ok(resize(scaled, size))
}

fn resize<P>(img: ImageBuffer<P, Vec<f32>>, size: usize) -> ImageBuffer<P, Vec<f32>>
where
    P: image::Pixel<Subpixel = f32> + 'static,
{
    if img.width() as usize == size && img.height() as usize == size {
        img
    } else {
        imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    }
}

/// Mirror `[C, T, H, W]` along W.
pub fn flip_width<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let w = *t.shape().last().expect("non-scalar tensor");
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// With probability `p`, mirror rgb, depth and ground truth jointly.
pub fn augment_flip<S: Scalar, R: Rng + ?Sized>(sample: ClipSample<S>, p: f64, rng: &mut R) -> ClipSample<S> {
    if rng.random::<f64>() < p {
        flip_sample(&sample)
    } else {
        sample
    }
}

pub fn flip_sample<S: Scalar>(s: &ClipSample<S>) -> ClipSample<S> {
    ClipSample {
        rgb: flip_width(&s.rgb),
        depth: s.depth.as_ref().map(flip_width),
        gt: s.gt.mirrored(),
        center_frame: s.center_frame,
        video_id: s.video_id.clone(),
    }
}
