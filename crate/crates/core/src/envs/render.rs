//! Software rasterizer. A pixel belongs to a shape when its centre lies
//! inside it; the agent mask is exactly the union of the arm's shapes.

use super::{WorldState, OBJECT_HALF};
use crate::numerics::Rng;

/// Base of the arm: fixed at the bottom centre of the image.
pub const ARM_BASE: [f64; 2] = [0.5, 1.0];
pub const LINK_LENGTH: f64 = 0.6;
pub const LINK_HALF_WIDTH: f64 = 0.0125;
pub const EFFECTOR_RADIUS: f64 = 0.035;
pub const BASE_HALF_EXTENT: [f64; 2] = [0.06, 0.03];
pub const GOAL_RADIUS: f64 = 0.05;

pub const GOAL_RGB: [u8; 3] = [40, 200, 70];
pub const OBSTACLE_RGB: [u8; 3] = [128, 128, 128];
pub const OBJECT_RGB: [u8; 3] = [40, 80, 220];
pub const LINK_RGB: [u8; 3] = [225, 110, 40];
pub const EFFECTOR_RGB: [u8; 3] = [250, 210, 60];
pub const BASE_RGB: [u8; 3] = [150, 40, 40];
pub const PLAIN_BACKGROUND: [u8; 3] = [24, 24, 32];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Disc {
        centre: [f64; 2],
        radius: f64,
    },
    /// Axis-aligned box.
    Box {
        min: [f64; 2],
        max: [f64; 2],
    },
    /// Rectangle of the given half-width around the segment `a`–`b`.
    Bar {
        a: [f64; 2],
        b: [f64; 2],
        half_width: f64,
    },
}

impl Shape {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        match *self {
            Shape::Disc { centre, radius } => {
                let (dx, dy) = (p[0] - centre[0], p[1] - centre[1]);
                dx * dx + dy * dy <= radius * radius
            }
            Shape::Box { min, max } => p[0] >= min[0] && p[0] <= max[0] && p[1] >= min[1] && p[1] <= max[1],
            Shape::Bar { a, b, half_width } => {
                let (ux, uy) = (b[0] - a[0], b[1] - a[1]);
                let len = (ux * ux + uy * uy).sqrt();
                let (dx, dy) = (p[0] - a[0], p[1] - a[1]);
                let along = (dx * ux + dy * uy) / len;
                let across = (dx * uy - dy * ux) / len;
                (0.0..=len).contains(&along) && across.abs() <= half_width
            }
        }
    }

    /// Conservative bounding box in world units.
    fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        match *self {
            Shape::Disc { centre, radius } => (
                [centre[0] - radius, centre[1] - radius],
                [centre[0] + radius, centre[1] + radius],
            ),
            Shape::Box { min, max } => (min, max),
            Shape::Bar { a, b, half_width } => (
                [a[0].min(b[0]) - half_width, a[1].min(b[1]) - half_width],
                [a[0].max(b[0]) + half_width, a[1].max(b[1]) + half_width],
            ),
        }
    }
}

/// Elbow position for an end-effector target. Both links have the same
/// length; the elbow always bends to the same side so the pose is continuous.
pub fn elbow(effector: [f64; 2]) -> [f64; 2] {
    let (dx, dy) = (effector[0] - ARM_BASE[0], effector[1] - ARM_BASE[1]);
    let d = (dx * dx + dy * dy).sqrt().clamp(1e-9, 2.0 * LINK_LENGTH);
    let heading = dy.atan2(dx);
    let bend = (d / (2.0 * LINK_LENGTH)).clamp(-1.0, 1.0).acos();
    let angle = heading - bend;
    [
        ARM_BASE[0] + LINK_LENGTH * angle.cos(),
        ARM_BASE[1] + LINK_LENGTH * angle.sin(),
    ]
}

/// Base, elbow and end-effector positions.
pub fn joints(state: &WorldState) -> [[f64; 2]; 3] {
    [ARM_BASE, elbow(state.agent_pos), state.agent_pos]
}

pub fn agent_shapes(state: &WorldState) -> Vec<(Shape, [u8; 3])> {
    let [base, el, ee] = joints(state);
    vec![
        (
            Shape::Box {
                min: [base[0] - BASE_HALF_EXTENT[0], base[1] - BASE_HALF_EXTENT[1]],
                max: [base[0] + BASE_HALF_EXTENT[0], base[1] + BASE_HALF_EXTENT[1]],
            },
            BASE_RGB,
        ),
        (
            Shape::Bar {
                a: base,
                b: el,
                half_width: LINK_HALF_WIDTH,
            },
            LINK_RGB,
        ),
        (
            Shape::Bar {
                a: el,
                b: ee,
                half_width: LINK_HALF_WIDTH,
            },
            LINK_RGB,
        ),
        (
            Shape::Disc {
                centre: ee,
                radius: EFFECTOR_RADIUS,
            },
            EFFECTOR_RGB,
        ),
    ]
}

/// Scene shapes drawn beneath the agent, in painting order.
pub fn scene_shapes(state: &WorldState, show_obstacle: bool) -> Vec<(Shape, [u8; 3])> {
    let mut out = vec![(
        Shape::Disc {
            centre: state.goal_pos,
            radius: GOAL_RADIUS,
        },
        GOAL_RGB,
    )];
    if show_obstacle {
        out.push((
            Shape::Disc {
                centre: state.obstacle_pos,
                radius: state.obstacle_radius,
            },
            OBSTACLE_RGB,
        ));
    }
    if let Some(o) = state.object_pos {
        out.push((
            Shape::Box {
                min: [o[0] - OBJECT_HALF, o[1] - OBJECT_HALF],
                max: [o[0] + OBJECT_HALF, o[1] + OBJECT_HALF],
            },
            OBJECT_RGB,
        ));
    }
    out
}

fn pixel_range(lo: f64, hi: f64, size: usize) -> std::ops::Range<usize> {
    let s = size as f64;
    let start = ((lo * s - 0.5).floor().max(0.0)) as usize;
    let end = ((hi * s + 0.5).ceil().max(0.0) as usize).min(size);
    start.min(size)..end
}

/// Calls `f(row, col)` for every pixel whose centre lies inside `shape`.
pub fn for_each_pixel(shape: &Shape, size: usize, mut f: impl FnMut(usize, usize)) {
    let (min, max) = shape.bounds();
    let s = size as f64;
    for row in pixel_range(min[1], max[1], size) {
        for col in pixel_range(min[0], max[0], size) {
            if shape.contains([(col as f64 + 0.5) / s, (row as f64 + 0.5) / s]) {
                f(row, col);
            }
        }
    }
}

/// Planar `[3, size, size]` RGB.
pub fn paint(canvas: &mut [u8], size: usize, shape: &Shape, rgb: [u8; 3]) {
    let n = size * size;
    for_each_pixel(shape, size, |r, c| {
        for (ch, &v) in rgb.iter().enumerate() {
            canvas[ch * n + r * size + c] = v;
        }
    });
}

/// Binary agent mask (`0`/`1` per pixel) at any resolution.
pub fn agent_mask(state: &WorldState, size: usize) -> Vec<u8> {
    let mut mask = vec![0u8; size * size];
    for (shape, _) in agent_shapes(state) {
        for_each_pixel(&shape, size, |r, c| mask[r * size + c] = 1);
    }
    mask
}

/// Procedural background of soft coloured blobs, planar `[3, size, size]`.
pub fn blob_background(size: usize, rng: &mut Rng) -> Vec<u8> {
    let n = size * size;
    let base: [f64; 3] = std::array::from_fn(|_| rng.uniform_range(10.0, 90.0));
    let blobs: Vec<([f64; 2], f64, [f64; 3])> = (0..7)
        .map(|_| {
            let centre = [rng.uniform(), rng.uniform()];
            let sigma = rng.uniform_range(0.06, 0.25);
            let colour = std::array::from_fn(|_| rng.uniform_range(-60.0, 200.0));
            (centre, sigma, colour)
        })
        .collect();
    let mut out = vec![0u8; 3 * n];
    for r in 0..size {
        for c in 0..size {
            let p = [(c as f64 + 0.5) / size as f64, (r as f64 + 0.5) / size as f64];
            let mut v = base;
            for (centre, sigma, colour) in &blobs {
                let d2 = (p[0] - centre[0]).powi(2) + (p[1] - centre[1]).powi(2);
                let w = (-d2 / (2.0 * sigma * sigma)).exp();
                v.iter_mut().zip(colour).for_each(|(a, b)| *a += w * b);
            }
            for ch in 0..3 {
                out[ch * n + r * size + c] = v[ch].round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

pub fn plain_background(size: usize) -> Vec<u8> {
    let n = size * size;
    PLAIN_BACKGROUND
        .iter()
        .flat_map(|&v| std::iter::repeat_n(v, n))
        .collect()
}

/// Paints scene and agent over `background`; returns `(rgb, mask)`.
pub fn render(state: &WorldState, size: usize, background: &[u8], show_obstacle: bool) -> (Vec<u8>, Vec<u8>) {
    let mut rgb = background.to_vec();
    for (shape, colour) in scene_shapes(state, show_obstacle) {
        paint(&mut rgb, size, &shape, colour);
    }
    for (shape, colour) in agent_shapes(state) {
        paint(&mut rgb, size, &shape, colour);
    }
    (rgb, agent_mask(state, size))
}
