//! Feature-pyramid anchor grids.
//!
//! The input image is resized so its shorter side hits `resize.shorter_side`
//! (longer side capped at `resize.max_side`), padded up to a multiple of
//! `pad_multiple`, and every pyramid level then places
//! `scale_octaves · |aspect_ratios|` anchors at each of its
//! `ceil(W / stride) · ceil(H / stride)` locations. Boxes are reported in
//! original-image coordinates.
//!
//! Anchor indices run level-major, then row, column, octave, ratio.

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResizeSpec {
    pub shorter_side: u32,
    pub max_side: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSpec {
    /// Strictly increasing pyramid strides, in resized pixels.
    pub strides: Vec<u32>,
    /// Base anchor side per level; `sizes.len() == strides.len()`.
    pub sizes: Vec<f64>,
    /// Height over width.
    pub aspect_ratios: Vec<f64>,
    /// Octave `i` scales the base size by `2^(i / scale_octaves)`.
    pub scale_octaves: u32,
    pub resize: Option<ResizeSpec>,
    pub pad_multiple: u32,
    /// Anchor centers sit at `(x + offset) · stride`.
    pub offset: f64,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            strides: vec![8, 16, 32, 64, 128],
            sizes: vec![32.0, 64.0, 128.0, 256.0, 512.0],
            aspect_ratios: vec![0.5, 1.0, 2.0],
            scale_octaves: 3,
            resize: Some(ResizeSpec {
                shorter_side: 800,
                max_side: 1333,
            }),
            pad_multiple: 32,
            offset: 0.0,
        }
    }
}

impl AnchorSpec {
    pub fn anchors_per_location(&self) -> usize {
        self.aspect_ratios.len() * self.scale_octaves as usize
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.strides.is_empty() {
            return Err("anchor spec needs at least one stride".into());
        }
        if self.strides[0] == 0 || self.strides.windows(2).any(|w| w[0] >= w[1]) {
            return Err("strides must be positive and strictly increasing".into());
        }
        if self.sizes.len() != self.strides.len() {
            return Err(format!(
                "{} sizes given for {} strides",
                self.sizes.len(),
                self.strides.len()
            ));
        }
        if self.sizes.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err("anchor sizes must be positive".into());
        }
        if self.aspect_ratios.is_empty() || self.aspect_ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err("aspect ratios must be non-empty and positive".into());
        }
        if self.scale_octaves == 0 {
            return Err("scale_octaves must be at least 1".into());
        }
        if self.pad_multiple == 0 {
            return Err("pad_multiple must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.offset) {
            return Err("offset must lie in [0, 1)".into());
        }
        if let Some(r) = self.resize {
            if r.shorter_side == 0 || r.max_side < r.shorter_side {
                return Err("resize needs 0 < shorter_side <= max_side".into());
            }
        }
        Ok(())
    }
}

/// One pyramid level's location grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelShape {
    pub stride: u32,
    pub cols: u64,
    pub rows: u64,
}

impl LevelShape {
    pub fn locations(&self) -> u64 {
        self.cols * self.rows
    }
}

/// The anchor grid of one image size under one spec.
#[derive(Debug, Clone)]
pub struct AnchorGrid<'a> {
    spec: &'a AnchorSpec,
    scale_x: f64,
    scale_y: f64,
    levels: Vec<LevelShape>,
    /// Per-anchor (width, height) in resized pixels for each level, octave-major.
    cell: Vec<Vec<(f64, f64)>>,
}

/// Resized (width, height) before padding, with round-half-up like common detector preprocessing.
pub fn resized_dims(width: u32, height: u32, resize: Option<ResizeSpec>) -> (u32, u32) {
    let Some(r) = resize else {
        return (width, height);
    };
    let (w, h) = (f64::from(width), f64::from(height));
    let mut scale = f64::from(r.shorter_side) / w.min(h);
    if w.max(h) * scale > f64::from(r.max_side) {
        scale = f64::from(r.max_side) / w.max(h);
    }
    ((w * scale + 0.5) as u32, (h * scale + 0.5) as u32)
}

impl<'a> AnchorGrid<'a> {
    /// Panics on zero dimensions; the spec is assumed valid.
    pub fn new(width: u32, height: u32, spec: &'a AnchorSpec) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let (rw, rh) = resized_dims(width, height, spec.resize);
        let pad = spec.pad_multiple.max(1);
        let pw = u64::from(rw.div_ceil(pad) * pad);
        let ph = u64::from(rh.div_ceil(pad) * pad);
        let levels = spec
            .strides
            .iter()
            .map(|&s| LevelShape {
                stride: s,
                cols: pw.div_ceil(u64::from(s)),
                rows: ph.div_ceil(u64::from(s)),
            })
            .collect();
        let cell = spec
            .sizes
            .iter()
            .map(|&base| {
                let mut v = Vec::with_capacity(spec.anchors_per_location());
                for o in 0..spec.scale_octaves {
                    let size = base * 2f64.powf(f64::from(o) / f64::from(spec.scale_octaves));
                    for &r in &spec.aspect_ratios {
                        let w = size / r.sqrt();
                        v.push((w, w * r));
                    }
                }
                v
            })
            .collect();
        Self {
            spec,
            scale_x: f64::from(rw) / f64::from(width),
            scale_y: f64::from(rh) / f64::from(height),
            levels,
            cell,
        }
    }

    pub fn levels(&self) -> &[LevelShape] {
        &self.levels
    }

    pub fn count(&self) -> u64 {
        let per = self.spec.anchors_per_location() as u64;
        self.levels.iter().map(|l| l.locations() * per).sum()
    }

    /// Anchor kind `k` at location (`row`, `col`) of `level`.
    pub fn make(&self, level: usize, row: u64, col: u64, k: usize) -> BBox {
        let stride = f64::from(self.levels[level].stride);
        let cx = (col as f64 + self.spec.offset) * stride;
        let cy = (row as f64 + self.spec.offset) * stride;
        let (w, h) = self.cell[level][k];
        BBox::new(
            (cx - w / 2.0) / self.scale_x,
            (cy - h / 2.0) / self.scale_y,
            (cx + w / 2.0) / self.scale_x,
            (cy + h / 2.0) / self.scale_y,
        )
        .expect("anchor sizes are positive")
    }

    /// Width and height of anchor kind `k` on `level`, in original-image pixels.
    pub fn anchor_dims(&self, level: usize, k: usize) -> (f64, f64) {
        let (w, h) = self.cell[level][k];
        (w / self.scale_x, h / self.scale_y)
    }

    /// Center of location (`row`, `col`) on `level`, in original-image pixels.
    pub fn center(&self, level: usize, row: u64, col: u64) -> (f64, f64) {
        let stride = f64::from(self.levels[level].stride);
        (
            (col as f64 + self.spec.offset) * stride / self.scale_x,
            (row as f64 + self.spec.offset) * stride / self.scale_y,
        )
    }

    /// Location on `level` whose center is nearest to original-image point (`x`, `y`).
    pub fn nearest_location(&self, level: usize, x: f64, y: f64) -> (u64, u64) {
        let l = &self.levels[level];
        let stride = f64::from(l.stride);
        let pick = |v: f64, n: u64| ((v / stride - self.spec.offset).round().max(0.0) as u64).min(n - 1);
        (pick(y * self.scale_y, l.rows), pick(x * self.scale_x, l.cols))
    }

    pub fn index_of(&self, level: usize, row: u64, col: u64, k: usize) -> u64 {
        let per = self.spec.anchors_per_location() as u64;
        let before: u64 = self.levels[..level].iter().map(|l| l.locations() * per).sum();
        before + (row * self.levels[level].cols + col) * per + k as u64
    }

    /// Anchor `index`, or `None` past the end.
    pub fn box_at(&self, index: u64) -> Option<BBox> {
        let per = self.spec.anchors_per_location() as u64;
        let mut rest = index;
        for (li, l) in self.levels.iter().enumerate() {
            let n = l.locations() * per;
            if rest < n {
                let loc = rest / per;
                return Some(self.make(li, loc / l.cols, loc % l.cols, (rest % per) as usize));
            }
            rest -= n;
        }
        None
    }

    pub fn boxes(&self) -> Vec<BBox> {
        let per = self.spec.anchors_per_location();
        let mut out = Vec::with_capacity(self.count() as usize);
        for (li, l) in self.levels.iter().enumerate() {
            for row in 0..l.rows {
                for col in 0..l.cols {
                    for k in 0..per {
                        out.push(self.make(li, row, col, k));
                    }
                }
            }
        }
        out
    }
}
