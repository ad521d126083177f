//! Binary and blurred fixation maps.

use crate::data::manifest::FixationSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Ground truth for one frame at prediction resolution, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth<S> {
    pub height: usize,
    pub width: usize,
    /// `Y_b`: true at every fixated cell.
    pub binary: Vec<bool>,
    /// `Y_c`: Gaussian-blurred `Y_b`, max-normalized to 1 (all zero without fixations).
    pub continuous: Vec<S>,
    /// `N_b`: number of distinct fixated cells.
    pub fixation_count: usize,
}

/// Default blur width as a fraction of the map width.
pub const DEFAULT_SIGMA_FRACTION: f64 = 0.045;

/// Map a coordinate on a `src`-pixel axis onto an `dst`-cell axis (pixel
/// centers aligned), rounding half-way cases away from the grid center so
/// that the mapping commutes with mirroring.
pub fn map_coordinate(v: f64, src: u32, dst: usize) -> usize {
    let g = (v + 0.5) * dst as f64 / src as f64 - 0.5;
    let center = (dst as f64 - 1.0) / 2.0;
    let cell = if g <= center { (g - 0.5).ceil() } else { (g + 0.5).floor() };
    cell.clamp(0.0, dst as f64 - 1.0) as usize
}

/// Fixated cells of `fixations` on an `h`×`w` grid, given the source frame size.
pub fn fixation_cells(fixations: &FixationSet, source: (u32, u32), size: (usize, usize)) -> Vec<(usize, usize)> {
    let (src_w, src_h) = source;
    let (h, w) = size;
    fixations.points.iter().map(|p| (map_coordinate(p.y, src_h, h), map_coordinate(p.x, src_w, w))).collect()
}

/// Build `Y_b` and `Y_c` for fixations given in `source` = (width, height)
/// pixels, on a grid of `size` = (H, W), with blur width `sigma` in cells.
pub fn build_ground_truth<S: Scalar>(
    fixations: &FixationSet,
    source: (u32, u32),
    size: (usize, usize),
    sigma: f64,
) -> Result<GroundTruth<S>> {
    let cells = fixation_cells(fixations, source, size);
    ground_truth_from_cells(&cells, size, sigma)
}

pub fn ground_truth_from_cells<S: Scalar>(cells: &[(usize, usize)], size: (usize, usize), sigma: f64) -> Result<GroundTruth<S>> {
    let (h, w) = size;
    if h == 0 || w == 0 {
        return Err(Error::Input(format!("ground truth size must be positive, got {h}x{w}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Input(format!("sigma must be positive, got {sigma}")));
    }
    let mut binary = vec![false; h * w];
    for &(r, c) in cells {
        if r >= h || c >= w {
            return Err(Error::Input(format!("fixation cell ({r}, {c}) outside {h}x{w} grid")));
        }
        binary[r * w + c] = true;
    }
    let fixation_count = binary.iter().filter(|&&b| b).count();
    let continuous = if fixation_count == 0 {
        vec![S::zero(); h * w]
    } else {
        let blurred = gaussian_blur(&binary, h, w, sigma);
        let max = blurred.iter().cloned().fold(0.0, f64::max);
        blurred.into_iter().map(|v| S::of(v / max)).collect()
    };
    Ok(GroundTruth { height: h, width: w, binary, continuous, fixation_count })
}

/// Separable Gaussian blur over the full grid extent with zero padding.
fn gaussian_blur(binary: &[bool], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let n = h.max(w);
    let kernel: Vec<f64> = (0..n).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let mut rows = vec![0.0; h * w];
    for r in 0..h {
        let src = &binary[r * w..(r + 1) * w];
        if !src.contains(&true) {
            continue;
        }
        for (c, &on) in src.iter().enumerate() {
            if on {
                for (j, out) in rows[r * w..(r + 1) * w].iter_mut().enumerate() {
                    *out += kernel[j.abs_diff(c)];
                }
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for i in 0..h {
            let k = kernel[r.abs_diff(i)];
            let (src, dst) = (&rows[r * w..(r + 1) * w], &mut out[i * w..(i + 1) * w]);
            for (d, s) in dst.iter_mut().zip(src) {
                *d += k * s;
            }
        }
    }
    out
}

impl<S: Scalar> GroundTruth<S> {
    pub fn empty(height: usize, width: usize) -> Self {
        GroundTruth { height, width, binary: vec![false; height * width], continuous: vec![S::zero(); height * width], fixation_count: 0 }
    }

    /// Mirror along the width axis.
    pub fn mirrored(&self) -> Self {
        let w = self.width;
        let mut out = self.clone();
        for r in 0..self.height {
            out.binary[r * w..(r + 1) * w].reverse();
            out.continuous[r * w..(r + 1) * w].reverse();
        }
        out
    }

    pub fn fixated_cells(&self) -> Vec<usize> {
        self.binary.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    pub fn cast<T: Scalar>(&self) -> GroundTruth<T> {
        GroundTruth {
            height: self.height,
            width: self.width,
            binary: self.binary.clone(),
            continuous: self.continuous.iter().map(|&v| T::of(v.as_f64())).collect(),
            fixation_count: self.fixation_count,
        }
    }
}
