use prl_tensor::Tensor;

use crate::error::{Result, TrackError};

/// One RGB frame in planar channel layout with values in [0, 1]. The
/// per-channel means are precomputed; they pad crop taps that fall outside
/// the frame.
pub struct Frame {
    pixels: Tensor,
    means: [f32; 3],
}

impl Frame {
    pub fn new(pixels: Tensor) -> Result<Frame> {
        let &[c, h, w] = pixels.shape() else {
            return Err(TrackError::Data(format!(
                "frame must be a rank-3 channel map, got shape {:?}",
                pixels.shape()
            )));
        };
        if c != 3 || h == 0 || w == 0 {
            return Err(TrackError::Data(format!(
                "frame must be 3 x H x W with nonzero extents, got {c} x {h} x {w}"
            )));
        }
        let plane = h * w;
        let data = pixels.as_slice();
        let mut means = [0.0f32; 3];
        for (ch, mean) in means.iter_mut().enumerate() {
            let sum: f64 = data[ch * plane..(ch + 1) * plane]
                .iter()
                .map(|&v| v as f64)
                .sum();
            *mean = (sum / plane as f64) as f32;
        }
        Ok(Frame { pixels, means })
    }

    /// Builds a frame from interleaved 8-bit RGB rows, mapping 0..=255 to
    /// [0, 1].
    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Frame> {
        if bytes.len() != width * height * 3 {
            return Err(TrackError::Data(format!(
                "expected {} RGB bytes for {width} x {height}, got {}",
                width * height * 3,
                bytes.len()
            )));
        }
        let plane = width * height;
        let mut data = vec![0.0f32; 3 * plane];
        for (i, px) in bytes.chunks_exact(3).enumerate() {
            for ch in 0..3 {
                data[ch * plane + i] = px[ch] as f32 / 255.0;
            }
        }
        Ok(Frame {
            pixels: Tensor::from_vec(&[3, height, width], data)?,
            means: {
                let mut m = [0.0f32; 3];
                for (ch, mean) in m.iter_mut().enumerate() {
                    let sum: u64 = bytes
                        .chunks_exact(3)
                        .map(|px| px[ch] as u64)
                        .sum();
                    *mean = (sum as f64 / (plane as f64 * 255.0)) as f32;
                }
                m
            },
        })
    }

    pub fn width(&self) -> usize {
        self.pixels.extent(2)
    }

    pub fn height(&self) -> usize {
        self.pixels.extent(1)
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn channel_means(&self) -> [f32; 3] {
        self.means
    }
}

/// Affine relation between a square crop and its source frame: output pixel
/// (i, j) samples the frame at `center + (j - (out-1)/2) * side / out` along
/// x, and likewise along y. When `side == out`, the center is integral, and
/// `out` is odd, sample positions land exactly on pixel centers.
#[derive(Clone, Copy, Debug)]
pub struct CropMap {
    pub center: (f32, f32),
    pub side: f32,
    pub out: usize,
}

impl CropMap {
    /// Frame pixels covered per output pixel.
    pub fn scale(&self) -> f32 {
        self.side / self.out as f32
    }

    pub fn to_frame(&self, px: f32, py: f32) -> (f32, f32) {
        let half = (self.out - 1) as f32 / 2.0;
        let s = self.scale();
        (
            self.center.0 + (px - half) * s,
            self.center.1 + (py - half) * s,
        )
    }

    pub fn to_patch(&self, fx: f32, fy: f32) -> (f32, f32) {
        let half = (self.out - 1) as f32 / 2.0;
        let s = self.scale();
        ((fx - self.center.0) / s + half, (fy - self.center.1) / s + half)
    }
}

/// Cuts a square region of extent `side` centered at `center` out of the
/// frame and resamples it to `out` x `out` with bilinear interpolation.
/// Taps outside the frame read the per-channel mean.
pub fn crop_patch(frame: &Frame, center: (f32, f32), side: f32, out: usize) -> Result<(Tensor, CropMap)> {
    if !(side > 0.0) || out == 0 {
        return Err(TrackError::Config(format!(
            "crop needs a positive side and output extent, got side {side}, out {out}"
        )));
    }
    let map = CropMap { center, side, out };
    let (w, h) = (frame.width(), frame.height());
    let plane = w * h;
    let src = frame.pixels.as_slice();
    let means = frame.means;
    let mut data = vec![0.0f32; 3 * out * out];
    let tap = |ch: usize, x: isize, y: isize| -> f32 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            means[ch]
        } else {
            src[ch * plane + y as usize * w + x as usize]
        }
    };
    for i in 0..out {
        for j in 0..out {
            let (fx, fy) = map.to_frame(j as f32, i as f32);
            let x0 = fx.floor();
            let y0 = fy.floor();
            let dx = fx - x0;
            let dy = fy - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..3 {
                let v00 = tap(ch, x0, y0);
                let v01 = tap(ch, x0 + 1, y0);
                let v10 = tap(ch, x0, y0 + 1);
                let v11 = tap(ch, x0 + 1, y0 + 1);
                let top = v00 + (v01 - v00) * dx;
                let bot = v10 + (v11 - v10) * dx;
                data[ch * out * out + i * out + j] = top + (bot - top) * dy;
            }
        }
    }
    Ok((Tensor::from_vec(&[3, out, out], data)?, map))
}
