//! Synthetic depth data: scene rendering, depth normalisation, and the
//! on-disk dataset layout.

mod io;
mod normalize;
mod scene;

pub use io::{
    load_dataset, make_dataset, read_depth, read_mask, read_planes, read_ppm, write_depth, write_mask, write_planes,
    write_ppm, Manifest, ManifestEntry, Split, MANIFEST_FILE,
};
pub use normalize::{denormalize_depth, depth_percentile, normalize_depth, NORM_EPS};
pub use scene::{generate_sample, render_scene, Floor, PlaneEquation, Primitive, SceneSpec};

use crate::error::{Error, Result};

/// Raster side length used throughout.
pub const IMAGE_SIZE: usize = 32;

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self {
            fx: 32.0,
            fy: 32.0,
            cx: 15.5,
            cy: 15.5,
        }
    }
}

impl Intrinsics {
    /// Ray through pixel `(u, v)` with unit z component.
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }

    /// Camera-frame point at z-depth `depth` behind pixel `(u, v)`.
    pub fn backproject(&self, u: usize, v: usize, depth: f64) -> [f64; 3] {
        self.ray(u as f64, v as f64).map(|c| c * depth)
    }
}

/// Planar region with its exact plane `normal · p + offset = 0` (camera frame, metres).
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneAnnotation {
    pub normal: [f64; 3],
    pub offset: f64,
    pub mask: Vec<bool>,
}

impl PlaneAnnotation {
    pub fn pixel_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// One image with its metric depth.
///
/// `image` is channel-major `[3, H, W]` in `[0, 1]`; `depth` and `mask` are
/// row-major `[H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthSample {
    pub width: usize,
    pub height: usize,
    pub image: Vec<f32>,
    pub depth: Vec<f32>,
    pub mask: Vec<bool>,
    pub intrinsics: Intrinsics,
    pub planes: Vec<PlaneAnnotation>,
}

/// Largest tolerated `|n·p + d|` for ground-truth points on an annotated plane.
pub const PLANE_TOLERANCE: f64 = 1e-4;

impl DepthSample {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Luminance raster in `[0, 1]`.
    pub fn grayscale(&self) -> Vec<f32> {
        let n = self.pixels();
        (0..n)
            .map(|i| 0.299 * self.image[i] + 0.587 * self.image[n + i] + 0.114 * self.image[2 * n + i])
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pixels();
        if self.image.len() != 3 * n || self.depth.len() != n || self.mask.len() != n {
            return Err(Error::Data("raster sizes disagree".into()));
        }
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0 && k.cx > 0.0 && k.cy > 0.0) {
            return Err(Error::Data(format!("intrinsics must be positive: {k:?}")));
        }
        if let Some(i) = (0..n).find(|&i| self.mask[i] && (self.depth[i].is_nan() || self.depth[i] <= 0.0)) {
            return Err(Error::Data(format!(
                "pixel {i} is valid but has depth {}",
                self.depth[i]
            )));
        }
        for (p, plane) in self.planes.iter().enumerate() {
            if plane.mask.len() != n {
                return Err(Error::Data(format!("plane {p} mask has wrong size")));
            }
            for i in (0..n).filter(|&i| plane.mask[i]) {
                if !self.mask[i] {
                    return Err(Error::Data(format!("plane {p} covers invalid pixel {i}")));
                }
                let pt = k.backproject(i % self.width, i / self.width, self.depth[i] as f64);
                let r = plane.normal[0] * pt[0] + plane.normal[1] * pt[1] + plane.normal[2] * pt[2] + plane.offset;
                if r.abs() >= PLANE_TOLERANCE {
                    return Err(Error::Data(format!(
                        "plane {p} residual {r:e} at pixel {i} exceeds tolerance"
                    )));
                }
            }
        }
        Ok(())
    }
}
