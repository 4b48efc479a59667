use rand::Rng;

use super::Image;

/// Zero padding on each side before the random crop.
pub const AUGMENT_PAD: usize = 4;

/// Crop of the zero-padded image at offset `(dy, dx)` (each in
/// `0..=2*pad`), same size as the input.
pub fn pad_crop(img: &Image, pad: usize, dy: usize, dx: usize) -> Image {
    let (h, w) = (img.height, img.width);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let sy = (y + dy) as isize - pad as isize;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        let src = &img.pixels[sy as usize * w..(sy as usize + 1) * w];
        let row = &mut out[y * w..(y + 1) * w];
        for (x, o) in row.iter_mut().enumerate() {
            let sx = (x + dx) as isize - pad as isize;
            if sx >= 0 && sx < w as isize {
                *o = src[sx as usize];
            }
        }
    }
    Image {
        height: h,
        width: w,
        pixels: out,
    }
}

/// Mirrors left to right.
pub fn hflip(img: &Image) -> Image {
    let mut pixels = img.pixels.clone();
    for row in pixels.chunks_mut(img.width) {
        row.reverse();
    }
    Image { pixels, ..img.clone() }
}

/// Training-time augmentation: random pad-and-crop, then a horizontal
/// flip with probability 0.5.
pub fn augment<R: Rng>(img: &Image, pad: usize, rng: &mut R) -> Image {
    let dy = rng.gen_range(0..=2 * pad);
    let dx = rng.gen_range(0..=2 * pad);
    let out = pad_crop(img, pad, dy, dx);
    if rng.gen_bool(0.5) {
        hflip(&out)
    } else {
        out
    }
}
