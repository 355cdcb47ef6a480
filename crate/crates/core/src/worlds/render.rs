use std::fmt;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Row-major `[height, width, channels]` image with values in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Image({}x{}x{})", self.height, self.width, self.channels)
    }
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::contract(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, color: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| color).collect();
        Self {
            height,
            width,
            channels: 3,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Widen to an `[H, W, C]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width, self.channels],
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("image dims")
    }

    /// Pixels whose values differ, as `(row, col)` pairs.
    pub fn changed_pixels(&self, other: &Image) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.height.min(other.height) {
            for c in 0..self.width.min(other.width) {
                if self.pixel(r, c) != other.pixel(r, c) {
                    out.push((r, c));
                }
            }
        }
        out
    }
}

/// World shape in pane coordinates `u, v ∈ [-0.5, 0.5]`, `v` pointing up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Circle { u: f64, v: f64, r: f64 },
    Rect { u: f64, v: f64, hu: f64, hv: f64 },
}

impl Shape {
    fn contains(&self, pu: f64, pv: f64) -> bool {
        match *self {
            Shape::Circle { u, v, r } => (pu - u).powi(2) + (pv - v).powi(2) <= r * r,
            Shape::Rect { u, v, hu, hv } => (pu - u).abs() <= hu && (pv - v).abs() <= hv,
        }
    }

    /// `(u_lo, u_hi, v_lo, v_hi)`
    fn extent(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Circle { u, v, r } => (u - r, u + r, v - r, v + r),
            Shape::Rect { u, v, hu, hv } => (u - hu, u + hu, v - hv, v + hv),
        }
    }
}

/// A rectangular block of columns showing the square `[-0.5, 0.5]²`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pane {
    pub col0: usize,
    pub cols: usize,
    pub rows: usize,
}

const SUBSAMPLES: [f64; 2] = [0.25, 0.75];

/// Blend `shape` into `image` with 2x2 supersampled coverage. Pixels outside
/// the shape's extent plus one pixel are never touched.
pub fn fill(image: &mut Image, pane: Pane, shape: Shape, color: [f32; 3]) {
    let (ulo, uhi, vlo, vhi) = shape.extent();
    let to_col = |u: f64| (u + 0.5) * pane.cols as f64;
    let to_row = |v: f64| (0.5 - v) * pane.rows as f64;
    let c0 = (to_col(ulo).floor() - 1.0).max(0.0) as usize;
    let c1 = ((to_col(uhi).ceil() + 1.0).max(0.0) as usize).min(pane.cols);
    let r0 = (to_row(vhi).floor() - 1.0).max(0.0) as usize;
    let r1 = ((to_row(vlo).ceil() + 1.0).max(0.0) as usize).min(pane.rows.min(image.height));
    for row in r0..r1 {
        for col in c0..c1 {
            let mut hits = 0u32;
            for sr in SUBSAMPLES {
                for sc in SUBSAMPLES {
                    let pu = (col as f64 + sc) / pane.cols as f64 - 0.5;
                    let pv = 0.5 - (row as f64 + sr) / pane.rows as f64;
                    hits += shape.contains(pu, pv) as u32;
                }
            }
            if hits == 0 {
                continue;
            }
            let cover = hits as f64 / 4.0;
            let gc = pane.col0 + col;
            if gc >= image.width {
                continue;
            }
            let i = (row * image.width + gc) * image.channels;
            for ch in 0..3 {
                let old = image.data[i + ch] as f64;
                image.data[i + ch] = (old * (1.0 - cover) + color[ch] as f64 * cover) as f32;
            }
        }
    }
}
