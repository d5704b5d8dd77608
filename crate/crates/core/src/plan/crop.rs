use super::{NormalizedBox, PlanError, BOX_SCALE};
use crate::sim::Image;

/// An object-centric crop plus where each of its patches sits in the source.
#[derive(Clone, Debug, PartialEq)]
pub struct CropResult {
    pub crop: Image,
    /// Patch centers `(x, y)` in source pixel units, row-major over patches.
    pub patch_centers: Vec<[f64; 2]>,
    /// Source frame size `(width, height)` the centers refer to.
    pub frame: (usize, usize),
    /// Clamped source rectangle `[x0, y0, x1, y1]` in pixels.
    pub source_rect: [f64; 4],
}

fn bilinear(src: &Image, x: f64, y: f64) -> [f32; 3] {
    // x, y in continuous pixel coordinates where pixel (c, r) has center (c+0.5, r+0.5)
    let fx = (x - 0.5).clamp(0.0, (src.width - 1) as f64);
    let fy = (y - 0.5).clamp(0.0, (src.height - 1) as f64);
    let c0 = fx.floor() as usize;
    let r0 = fy.floor() as usize;
    let c1 = (c0 + 1).min(src.width - 1);
    let r1 = (r0 + 1).min(src.height - 1);
    let tx = (fx - c0 as f64) as f32;
    let ty = (fy - r0 as f64) as f32;
    let (a, b, c, d) = (
        src.get(r0, c0),
        src.get(r0, c1),
        src.get(r1, c0),
        src.get(r1, c1),
    );
    let mut out = [0.0f32; 3];
    for k in 0..3 {
        let top = a[k] * (1.0 - tx) + b[k] * tx;
        let bot = c[k] * (1.0 - tx) + d[k] * tx;
        out[k] = top * (1.0 - ty) + bot * ty;
    }
    out
}

/// Crops `source` to `bbox`, resizes bilinearly to `out_side²`, and maps each
/// output patch center back into source pixel coordinates.
pub fn crop_image(
    source: &Image,
    bbox: &NormalizedBox,
    out_side: usize,
    patch: usize,
) -> Result<CropResult, PlanError> {
    if patch == 0 || out_side == 0 || !out_side.is_multiple_of(patch) {
        return Err(PlanError::CropGeometry {
            side: out_side,
            patch,
        });
    }
    let w = source.width as f64;
    let h = source.height as f64;
    let s = BOX_SCALE as f64;
    let x0 = (bbox.xmin as f64 / s * w).clamp(0.0, w);
    let x1 = (bbox.xmax as f64 / s * w).clamp(0.0, w);
    let y0 = (bbox.ymin as f64 / s * h).clamp(0.0, h);
    let y1 = (bbox.ymax as f64 / s * h).clamp(0.0, h);
    if x1 - x0 < 1.0 || y1 - y0 < 1.0 {
        return Err(PlanError::DegenerateCrop);
    }
    let sx = (x1 - x0) / out_side as f64;
    let sy = (y1 - y0) / out_side as f64;
    let mut crop = Image::filled(out_side, out_side, source.view, [0.0; 3]);
    for r in 0..out_side {
        let y = y0 + (r as f64 + 0.5) * sy;
        for c in 0..out_side {
            let x = x0 + (c as f64 + 0.5) * sx;
            crop.put(r, c, bilinear(source, x, y));
        }
    }
    let grid = out_side / patch;
    let mut patch_centers = Vec::with_capacity(grid * grid);
    for pr in 0..grid {
        for pc in 0..grid {
            let ox = (pc as f64 + 0.5) * patch as f64;
            let oy = (pr as f64 + 0.5) * patch as f64;
            patch_centers.push([x0 + ox * sx, y0 + oy * sy]);
        }
    }
    Ok(CropResult {
        crop,
        patch_centers,
        frame: (source.width, source.height),
        source_rect: [x0, y0, x1, y1],
    })
}
