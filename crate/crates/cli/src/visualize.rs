use image::{Rgb, RgbImage};
use serde::Serialize;
use vmfcomp_core::autograd::Tensor;
use vmfcomp_core::data::Sample;

const SCALE: u32 = 2;
const GAP: u32 = 4;
const CHANNELS_PER_ROW: u32 = 6;
const BACKGROUND: Rgb<u8> = Rgb([40, 40, 40]);
const CLASS_COLORS: [[u8; 3]; 4] = [[0, 0, 0], [220, 50, 47], [133, 153, 0], [38, 139, 210]];

/// Model outputs for one sample.
pub struct SampleOutputs {
    /// Hard labels `H x W`.
    pub labels: Option<Vec<u8>>,
    /// `H x W` in `[0, 1]`.
    pub reconstruction: Option<Vec<f32>>,
    /// `[J, h, w]`.
    pub activations: Option<Tensor<f32>>,
}

#[derive(Debug, Serialize)]
pub struct Legend {
    pub panels: Vec<String>,
    pub channel_tiles: usize,
    pub channels_per_row: u32,
    pub note: String,
}

fn gray(v: f32) -> Rgb<u8> {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([g, g, g])
}

fn draw_tile(img: &mut RgbImage, x0: u32, y0: u32, h: usize, w: usize, pixel: impl Fn(usize, usize) -> Rgb<u8>) {
    for y in 0..h {
        for x in 0..w {
            let p = pixel(y, x);
            for dy in 0..SCALE {
                for dx in 0..SCALE {
                    img.put_pixel(x0 + x as u32 * SCALE + dx, y0 + y as u32 * SCALE + dy, p);
                }
            }
        }
    }
}

/// Input, ground truth, prediction and reconstruction (when available) in
/// the first row, then every activation channel, min-max normalized per
/// channel, six to a row.
pub fn render(sample: &Sample, out: &SampleOutputs) -> (RgbImage, Legend) {
    let (h, w) = (sample.height, sample.width);
    let (th, tw) = (h as u32 * SCALE, w as u32 * SCALE);
    let mut panels: Vec<(&str, Box<dyn Fn(usize, usize) -> Rgb<u8> + '_>)> = Vec::new();
    panels.push(("input", Box::new(|y, x| gray(sample.image[y * w + x]))));
    if let Some(m) = &sample.mask {
        panels.push(("ground truth", Box::new(move |y, x| Rgb(CLASS_COLORS[m[y * w + x] as usize % 4]))));
    }
    if let Some(l) = &out.labels {
        panels.push(("prediction", Box::new(move |y, x| Rgb(CLASS_COLORS[l[y * w + x] as usize % 4]))));
    }
    if let Some(r) = &out.reconstruction {
        panels.push(("reconstruction", Box::new(move |y, x| gray(r[y * w + x]))));
    }
    let j = out.activations.as_ref().map_or(0, |a| a.shape()[0]);
    let channel_rows = (j as u32).div_ceil(CHANNELS_PER_ROW);
    let cols = CHANNELS_PER_ROW.max(panels.len() as u32);
    let width = cols * tw + (cols + 1) * GAP;
    // panel row, then a double gap before the channel rows
    let height = (1 + channel_rows) * th + (2 + channel_rows) * GAP + if channel_rows > 0 { GAP } else { 0 };
    let mut img = RgbImage::from_pixel(width, height, BACKGROUND);
    for (i, (_, f)) in panels.iter().enumerate() {
        draw_tile(&mut img, GAP + i as u32 * (tw + GAP), GAP, h, w, f);
    }
    if let Some(a) = &out.activations {
        let (ah, aw) = (a.shape()[1], a.shape()[2]);
        for c in 0..j {
            let ch = &a.data()[c * ah * aw..(c + 1) * ah * aw];
            let lo = ch.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = ch.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            let (row, col) = (c as u32 / CHANNELS_PER_ROW, c as u32 % CHANNELS_PER_ROW);
            let x0 = GAP + col * (tw + GAP);
            let y0 = GAP + (row + 1) * (th + GAP) + GAP;
            draw_tile(&mut img, x0, y0, h, w, |y, x| gray((ch[(y * ah / h) * aw + x * aw / w] - lo) / span));
        }
    }
    let legend = Legend {
        panels: panels.iter().map(|(n, _)| n.to_string()).collect(),
        channel_tiles: j,
        channels_per_row: CHANNELS_PER_ROW,
        note: "activation tiles are min-max normalized per channel for display; labels: black background, red LV, green MYO, blue RV".into(),
    };
    (img, legend)
}
