//! Toy-mode training augmentation: a random crop resized back to the
//! original size. No flips, so word orientation is preserved.

use geo::{Area, BooleanOps, Coord, LineString, Polygon, Rect};
use image::imageops::{self, FilterType};
use image::{Rgb, Rgb32FImage};
use rand::Rng;

use crate::detector::TextInstance;
use crate::encoders::{Image, PIXEL_MEAN, PIXEL_STD};

/// Smallest crop side as a fraction of the image side.
pub const MIN_CROP: f64 = 0.6;

/// Fragments smaller than this (in output pixels²) are dropped.
const MIN_FRAGMENT: f64 = 1.0;

fn to_rgb32f(img: &Image) -> Rgb32FImage {
    let (h, w) = (img.height(), img.width());
    let d = img.data().data();
    Rgb32FImage::from_fn(w as u32, h as u32, |x, y| {
        let i = (y as usize * w + x as usize) * 3;
        Rgb([0, 1, 2].map(|c| (d[i + c] * PIXEL_STD + PIXEL_MEAN) as f32))
    })
}

fn from_rgb32f(img: &Rgb32FImage) -> Image {
    let (w, h) = img.dimensions();
    let data = img
        .as_raw()
        .iter()
        .map(|&v| (f64::from(v) - PIXEL_MEAN) / PIXEL_STD)
        .collect();
    Image::new(h as usize, w as usize, data).expect("resized buffer")
}

/// Parts of `inst` inside the window, mapped to output coordinates.
fn clip_instance(inst: &TextInstance, window: [f64; 4], scale: (f64, f64)) -> Vec<TextInstance> {
    if !inst.is_valid() {
        return Vec::new();
    }
    let ring: Vec<Coord<f64>> = inst.polygon.iter().map(|&[x, y]| Coord { x, y }).collect();
    let poly = Polygon::new(LineString::new(ring), vec![]);
    let rect = Rect::new(Coord { x: window[0], y: window[1] }, Coord { x: window[2], y: window[3] }).to_polygon();
    poly.intersection(&rect)
        .into_iter()
        .filter_map(|p| {
            let mut pts: Vec<[f64; 2]> = p
                .exterior()
                .coords()
                .map(|c| [(c.x - window[0]) * scale.0, (c.y - window[1]) * scale.1])
                .collect();
            if pts.len() > 1 && pts.first() == pts.last() {
                pts.pop();
            }
            let out = TextInstance {
                polygon: pts,
                ignore: inst.ignore,
                score: None,
                transcription: inst.transcription.clone(),
            };
            (p.unsigned_area() * scale.0 * scale.1 >= MIN_FRAGMENT && out.is_valid()).then_some(out)
        })
        .collect()
}

/// Crops a random window with sides in `[min_crop, 1]` of the image and
/// resizes it back to the input size; polygons are clipped to the window.
pub fn random_crop_resize<R: Rng>(
    rng: &mut R,
    image: &Image,
    instances: &[TextInstance],
    min_crop: f64,
) -> (Image, Vec<TextInstance>) {
    let (h, w) = (image.height(), image.width());
    let side = |n: usize, rng: &mut R| ((n as f64 * rng.random_range(min_crop..=1.0)).round() as usize).clamp(1, n);
    let (cw, ch) = (side(w, rng), side(h, rng));
    let (x0, y0) = (rng.random_range(0..=w - cw), rng.random_range(0..=h - ch));
    let window = [x0 as f64, y0 as f64, (x0 + cw) as f64, (y0 + ch) as f64];
    let scale = (w as f64 / cw as f64, h as f64 / ch as f64);
    let out_instances = instances.iter().flat_map(|i| clip_instance(i, window, scale)).collect();
    if (cw, ch) == (w, h) {
        return (image.clone(), out_instances);
    }
    let src = to_rgb32f(image);
    let crop = imageops::crop_imm(&src, x0 as u32, y0 as u32, cw as u32, ch as u32).to_image();
    let resized = imageops::resize(&crop, w as u32, h as u32, FilterType::Triangle);
    (from_rgb32f(&resized), out_instances)
}
