//! Per-channel maps of the last encoder convolution, blended over the frame.

use sear_core::pnm::Image;

/// Min-max scaling to `[0, 1]`; a constant channel maps to all zeros.
pub fn normalize(values: &[f32]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Nearest-neighbour resize of a square map.
pub fn resize_nearest(src: &[f32], from: usize, to: usize) -> Vec<f32> {
    assert_eq!(src.len(), from * from, "source must be {from}x{from}");
    let idx = |i: usize| (i * from / to).min(from - 1);
    (0..to * to).map(|k| src[idx(k / to) * from + idx(k % to)]).collect()
}

/// Fixed blue → cyan → yellow → red ramp.
pub fn false_color(v: f32) -> [u8; 3] {
    const STOPS: [[f32; 3]; 4] = [[0.0, 0.0, 0.6], [0.0, 0.8, 1.0], [1.0, 0.9, 0.0], [0.9, 0.0, 0.0]];
    let t = v.clamp(0.0, 1.0) * 3.0;
    let i = (t.floor() as usize).min(2);
    let f = t - i as f32;
    let mut out = [0u8; 3];
    for (k, o) in out.iter_mut().enumerate() {
        *o = ((STOPS[i][k] * (1.0 - f) + STOPS[i + 1][k] * f) * 255.0).round() as u8;
    }
    out
}

/// `0.5·frame + 0.5·colour(heat)` per pixel.
pub fn blend(frame: &Image, heat: &[f32]) -> Image {
    assert_eq!(frame.channels, 3, "frame must be RGB");
    assert_eq!(heat.len(), frame.width * frame.height, "heat map size");
    let pixels = frame
        .pixels
        .chunks(3)
        .zip(heat)
        .flat_map(|(px, &h)| {
            let c = false_color(h);
            [0, 1, 2].map(|k| ((px[k] as u16 + c[k] as u16 + 1) / 2) as u8)
        })
        .collect();
    Image::rgb(frame.width, frame.height, pixels)
}

/// `features` is `[C, s, s]` flattened; returns one blended image per
/// channel.
pub fn channel_images(features: &[f32], channels: usize, frame: &Image) -> Vec<Image> {
    let plane = features.len() / channels;
    let side = (plane as f64).sqrt().round() as usize;
    assert_eq!(side * side, plane, "feature planes must be square");
    features
        .chunks(plane)
        .map(|c| blend(frame, &resize_nearest(&normalize(c), side, frame.width)))
        .collect()
}

/// Tiles equally sized images row-major with a 2 px white gutter.
pub fn contact_sheet(images: &[Image], cols: usize) -> Image {
    let (w, h) = (images[0].width, images[0].height);
    let rows = images.len().div_ceil(cols);
    let gap = 2;
    let (sw, sh) = (cols * (w + gap) + gap, rows * (h + gap) + gap);
    let mut pixels = vec![255u8; sw * sh * 3];
    for (k, img) in images.iter().enumerate() {
        let (ox, oy) = (gap + (k % cols) * (w + gap), gap + (k / cols) * (h + gap));
        for y in 0..h {
            let dst = 3 * ((oy + y) * sw + ox);
            pixels[dst..dst + 3 * w].copy_from_slice(&img.pixels[3 * y * w..3 * (y + 1) * w]);
        }
    }
    Image::rgb(sw, sh, pixels)
}
