//! Synthetic scene-text corpus: striped high-contrast rectangles on
//! structured backgrounds, in two background styles.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::{format_annotations, DatasetSpec, Split};
use crate::detector::TextInstance;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    /// Bright, smooth gradients.
    A,
    /// Dark, noisy diagonal texture.
    B,
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "domainA" | "A" | "a" => Ok(Domain::A),
            "domainB" | "B" | "b" => Ok(Domain::B),
            _ => Err(Error::InvalidConfig(format!("unknown toy domain {s:?}"))),
        }
    }
}

const MARGIN: u32 = 6;
const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

fn background(rng: &mut ChaCha8Rng, domain: Domain, size: u32) -> RgbImage {
    let mut img = RgbImage::new(size, size);
    match domain {
        Domain::A => {
            let base: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(110.0..160.0));
            let (gx, gy) = (rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6));
            for (x, y, px) in img.enumerate_pixels_mut() {
                let shade = gx * x as f64 + gy * y as f64;
                *px = Rgb(base.map(|b| (b + shade + rng.random_range(-4.0..4.0)).clamp(0.0, 255.0) as u8));
            }
        }
        Domain::B => {
            let base: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(30.0..80.0));
            let period = rng.random_range(5.0..9.0);
            for (x, y, px) in img.enumerate_pixels_mut() {
                let wave = 18.0 * ((x + y) as f64 * std::f64::consts::TAU / period).sin();
                *px = Rgb(base.map(|b| (b + wave + rng.random_range(-20.0..20.0)).clamp(0.0, 255.0) as u8));
            }
        }
    }
    img
}

fn overlaps(a: [u32; 4], b: [u32; 4]) -> bool {
    a[0] < b[2] + MARGIN && b[0] < a[2] + MARGIN && a[1] < b[3] + MARGIN && b[1] < a[3] + MARGIN
}

/// Draws a "word": alternating light and dark vertical strokes with a dark frame.
fn draw_word(img: &mut RgbImage, r: [u32; 4], rng: &mut ChaCha8Rng) {
    let light = Rgb([0, 1, 2].map(|_| rng.random_range(225..=255u8)));
    let dark = Rgb([0, 1, 2].map(|_| rng.random_range(0..=25u8)));
    let stroke = rng.random_range(2..=3u32);
    for y in r[1]..r[3] {
        for x in r[0]..r[2] {
            let frame = x == r[0] || y == r[1] || x + 1 == r[2] || y + 1 == r[3];
            let on = ((x - r[0]) / stroke).is_multiple_of(2);
            img.put_pixel(x, y, if frame || !on { dark } else { light });
        }
    }
}

/// One image and its word rectangles.
pub fn render(rng: &mut ChaCha8Rng, domain: Domain, size: u32) -> (RgbImage, Vec<TextInstance>) {
    let mut img = background(rng, domain, size);
    let scale = size as f64 / 64.0;
    let wmin = ((14.0 * scale) as u32).max(4);
    let wmax = ((30.0 * scale) as u32).max(wmin + 1).min(size - 2);
    let hmin = ((9.0 * scale) as u32).max(3);
    let hmax = ((16.0 * scale) as u32).max(hmin + 1).min(size - 2);
    let want = rng.random_range(1..=3);
    let mut rects: Vec<[u32; 4]> = Vec::new();
    for _ in 0..want * 40 {
        if rects.len() == want {
            break;
        }
        let w = rng.random_range(wmin..=wmax);
        let h = rng.random_range(hmin..=hmax);
        let x0 = rng.random_range(1..size - w);
        let y0 = rng.random_range(1..size - h);
        let r = [x0, y0, x0 + w, y0 + h];
        if rects.iter().all(|&o| !overlaps(r, o)) {
            rects.push(r);
        }
    }
    let mut instances = Vec::with_capacity(rects.len());
    for r in rects {
        draw_word(&mut img, r, rng);
        let len = rng.random_range(3..=6);
        let word: String = (0..len)
            .map(|_| LETTERS[rng.random_range(0..LETTERS.len())] as char)
            .collect();
        let mut inst = TextInstance::rect(r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64);
        inst.transcription = Some(word);
        instances.push(inst);
    }
    (img, instances)
}

/// Writes `count` images with annotations under `root` in the dataset layout.
pub fn generate_toy_data(root: &Path, count: usize, seed: u64, size: usize, domain: Domain) -> Result<DatasetSpec> {
    if count == 0 {
        return Err(Error::InvalidConfig("toy count must be >= 1".into()));
    }
    if size < 32 {
        return Err(Error::InvalidConfig(format!("toy image size {size} below 32")));
    }
    let spec = DatasetSpec::at(root, Split::Train);
    fs::create_dir_all(&spec.images_dir)?;
    fs::create_dir_all(&spec.annotations_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let (img, inst) = render(&mut rng, domain, size as u32);
        let stem = format!("toy_{i:04}");
        img.save(spec.images_dir.join(format!("{stem}.png")))?;
        fs::write(spec.annotations_dir.join(format!("gt_{stem}.txt")), format_annotations(&inst))?;
    }
    Ok(spec)
}
