use serde::{Deserialize, Serialize};

use super::{ObjectRecord, SceneState, SimError, CLASS_PLATE};
use crate::plan::NormalizedBox;

/// Full-resolution buffer the crop tool reads from.
pub const HIRES_WIDTH: usize = 960;
pub const HIRES_HEIGHT: usize = 540;
/// World extent covered by the wrist camera.
pub const WRIST_SPAN: f64 = 0.3;

const OUT_OF_WORLD: [f32; 3] = [0.15, 0.15, 0.15];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Global,
    Wrist,
}

/// Row-major `height × width × 3` image with values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub view: View,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, view: View, rgb: [f32; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            view,
            pixels,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Affine pixel-to-world map: `world = origin + (index + 0.5) * scale`.
#[derive(Clone, Copy)]
struct Frame {
    origin: [f64; 2],
    scale: [f64; 2],
    width: usize,
    height: usize,
}

impl Frame {
    fn global(width: usize, height: usize) -> Self {
        Self {
            origin: [0.0, 0.0],
            scale: [1.0 / width as f64, 1.0 / height as f64],
            width,
            height,
        }
    }

    fn wrist(center: [f64; 2], width: usize, height: usize) -> Self {
        Self {
            origin: [center[0] - WRIST_SPAN / 2.0, center[1] - WRIST_SPAN / 2.0],
            scale: [WRIST_SPAN / width as f64, WRIST_SPAN / height as f64],
            width,
            height,
        }
    }

    fn world(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.origin[0] + (col as f64 + 0.5) * self.scale[0],
            self.origin[1] + (row as f64 + 0.5) * self.scale[1],
        ]
    }

    /// Pixel index range whose centers may fall in `[lo, hi]` along `axis`.
    fn span(&self, axis: usize, lo: f64, hi: f64) -> Option<(usize, usize)> {
        let n = if axis == 0 { self.width } else { self.height };
        let a = ((lo - self.origin[axis]) / self.scale[axis] - 0.5).ceil() - 1.0;
        let b = ((hi - self.origin[axis]) / self.scale[axis] - 0.5).floor() + 1.0;
        let a = a.max(0.0);
        let b = b.min(n as f64 - 1.0);
        (a <= b).then_some((a as usize, b as usize))
    }

    fn for_each_pixel_of(&self, o: &ObjectRecord, mut f: impl FnMut(usize, usize)) {
        let Some((c0, c1)) = self.span(
            0,
            o.center[0] - o.half_extent[0],
            o.center[0] + o.half_extent[0],
        ) else {
            return;
        };
        let Some((r0, r1)) = self.span(
            1,
            o.center[1] - o.half_extent[1],
            o.center[1] + o.half_extent[1],
        ) else {
            return;
        };
        for r in r0..=r1 {
            for c in c0..=c1 {
                if o.contains(self.world(r, c)) {
                    f(r, c);
                }
            }
        }
    }
}

fn object_rgb(o: &ObjectRecord) -> [f32; 3] {
    let c = o.color.rgb();
    if o.class_name == CLASS_PLATE {
        [0.5 * c[0] + 0.5, 0.5 * c[1] + 0.5, 0.5 * c[2] + 0.5]
    } else {
        c
    }
}

/// Back-to-front paint order: supports first, held object last.
fn paint_order(state: &SceneState) -> Vec<&ObjectRecord> {
    let mut objs: Vec<&ObjectRecord> = state.objects.iter().collect();
    objs.sort_by_key(|o| {
        (
            o.held,
            o.class_name != CLASS_PLATE,
            state.height(o.id),
            o.id,
        )
    });
    objs
}

/// Deterministic rasterization of the scene.
///
/// The global view maps `[0,1]²` onto the frame; the wrist view is a
/// `WRIST_SPAN`-wide window centered on the gripper with a center marker
/// whose color encodes the gripper opening.
pub fn render(state: &SceneState, view: View, width: usize, height: usize) -> Image {
    let frame = match view {
        View::Global => Frame::global(width, height),
        View::Wrist => Frame::wrist(state.gripper.pos, width, height),
    };
    let mut img = Image::filled(width, height, view, state.background);
    if view == View::Wrist {
        for r in 0..height {
            for c in 0..width {
                let p = frame.world(r, c);
                if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
                    img.put(r, c, OUT_OF_WORLD);
                }
            }
        }
    }
    for o in paint_order(state) {
        let rgb = object_rgb(o);
        frame.for_each_pixel_of(o, |r, c| img.put(r, c, rgb));
    }
    if view == View::Wrist {
        let marker = ObjectRecord {
            id: usize::MAX,
            class_name: super::CLASS_BUTTON.to_string(),
            color: super::Color::Red,
            center: state.gripper.pos,
            half_extent: [0.012, 0.012],
            held: false,
            resting_on: None,
        };
        let rgb = if state.gripper.is_closed() {
            [0.0, 0.0, 0.0]
        } else {
            [1.0, 0.0, 1.0]
        };
        frame.for_each_pixel_of(&marker, |r, c| img.put(r, c, rgb));
    }
    img
}

/// Tight box around the object's own rasterized footprint in a global
/// frame of `width × height`, in the `[0,1000]` plan convention.
pub fn ground_truth_bbox(
    state: &SceneState,
    object_id: usize,
    width: usize,
    height: usize,
) -> Result<NormalizedBox, SimError> {
    let o = state.object(object_id)?;
    let frame = Frame::global(width, height);
    let mut ext: Option<(usize, usize, usize, usize)> = None;
    frame.for_each_pixel_of(o, |r, c| {
        ext = Some(match ext {
            None => (r, c, r, c),
            Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
        });
    });
    let (r0, c0, r1, c1) = ext.ok_or(SimError::Invisible(object_id))?;
    Ok(NormalizedBox::from_pixel_extent(
        r0,
        c0,
        r1 + 1,
        c1 + 1,
        width,
        height,
    ))
}
