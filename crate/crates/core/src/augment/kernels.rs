//! Pixel kernels for the fifteen operations. Magnitudes arrive already
//! validated and signed; these functions never fail.

use super::image::{to_pixel, Image};

pub const FILL: u8 = 128;

/// Resamples `img` where output pixel `(x, y)` reads source `map(x, y)`,
/// bilinearly, with out-of-bounds taps reading [`FILL`].
fn inverse_map(img: &Image, map: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let mut out = img.clone();
    let tap = |y: isize, x: isize, c: usize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            f64::from(FILL)
        } else {
            f64::from(img.get(y as usize, x as usize, c))
        }
    };
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = map(x as f64, y as f64);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for c in 0..ch {
                let v = if fx == 0.0 && fy == 0.0 {
                    tap(y0, x0, c)
                } else {
                    (1.0 - fy) * ((1.0 - fx) * tap(y0, x0, c) + fx * tap(y0, x0 + 1, c))
                        + fy * ((1.0 - fx) * tap(y0 + 1, x0, c) + fx * tap(y0 + 1, x0 + 1, c))
                };
                out.set(y, x, c, to_pixel(v));
            }
        }
    }
    out
}

fn center(img: &Image) -> (f64, f64) {
    ((img.width() as f64 - 1.0) / 2.0, (img.height() as f64 - 1.0) / 2.0)
}

pub fn shear_x(img: &Image, m: f64) -> Image {
    let (_, cy) = center(img);
    inverse_map(img, |x, y| (x + m * (y - cy), y))
}

pub fn shear_y(img: &Image, m: f64) -> Image {
    let (cx, _) = center(img);
    inverse_map(img, |x, y| (x, y + m * (x - cx)))
}

/// Shifts content right by `m · width` pixels.
pub fn translate_x(img: &Image, m: f64) -> Image {
    let d = m * img.width() as f64;
    inverse_map(img, |x, y| (x - d, y))
}

pub fn translate_y(img: &Image, m: f64) -> Image {
    let d = m * img.height() as f64;
    inverse_map(img, |x, y| (x, y - d))
}

/// Counter-clockwise rotation about the image center, in degrees.
pub fn rotate(img: &Image, degrees: f64) -> Image {
    if degrees == 0.0 {
        return img.clone();
    }
    let (cx, cy) = center(img);
    let (s, c) = degrees.to_radians().sin_cos();
    inverse_map(img, |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        (c * dx - s * dy + cx, s * dx + c * dy + cy)
    })
}

fn per_channel(img: &Image, f: impl Fn(&[u8]) -> [u8; 256]) -> Image {
    let ch = img.channels();
    let mut out = img.clone();
    for c in 0..ch {
        let plane: Vec<u8> = img.data().iter().skip(c).step_by(ch).copied().collect();
        let lut = f(&plane);
        for v in out.data_mut().iter_mut().skip(c).step_by(ch) {
            *v = lut[*v as usize];
        }
    }
    out
}

fn identity_lut() -> [u8; 256] {
    std::array::from_fn(|i| i as u8)
}

/// Stretches each channel to the full range; flat channels are kept.
pub fn auto_contrast(img: &Image) -> Image {
    per_channel(img, |plane| {
        let lo = *plane.iter().min().unwrap();
        let hi = *plane.iter().max().unwrap();
        if hi <= lo {
            return identity_lut();
        }
        let scale = 255.0 / f64::from(hi - lo);
        std::array::from_fn(|i| to_pixel((i as f64 - f64::from(lo)) * scale))
    })
}

pub fn invert(img: &Image) -> Image {
    let mut out = img.clone();
    out.data_mut().iter_mut().for_each(|v| *v = 255 - *v);
    out
}

/// Histogram equalization with the PIL lookup-table construction.
pub fn equalize(img: &Image) -> Image {
    per_channel(img, |plane| {
        let mut hist = [0usize; 256];
        plane.iter().for_each(|&v| hist[v as usize] += 1);
        let last = hist.iter().rposition(|&n| n > 0).unwrap();
        let step = (plane.len() - hist[last]) / 255;
        if step == 0 {
            return identity_lut();
        }
        let mut lut = [0u8; 256];
        let mut n = step / 2;
        for (i, &count) in hist.iter().enumerate() {
            lut[i] = (n / step).min(255) as u8;
            n += count;
        }
        lut
    })
}

/// Inverts pixels `v ≥ 256 − t`.
pub fn solarize(img: &Image, t: f64) -> Image {
    let mut out = img.clone();
    let threshold = 256.0 - t;
    for v in out.data_mut() {
        if f64::from(*v) >= threshold {
            *v = 255 - *v;
        }
    }
    out
}

/// Keeps the top `round(m)` bits of every pixel.
pub fn posterize(img: &Image, m: f64) -> Image {
    let bits = m.round() as u32;
    let mask: u8 = if bits == 0 { 0 } else { (0xFFu16 << (8 - bits)) as u8 };
    let mut out = img.clone();
    out.data_mut().iter_mut().for_each(|v| *v &= mask);
    out
}

/// `degenerate + f·(img − degenerate)`, per pixel.
fn blend(img: &Image, degenerate: &[f64], f: f64) -> Image {
    let mut out = img.clone();
    for (v, &d) in out.data_mut().iter_mut().zip(degenerate) {
        *v = to_pixel(d + f * (f64::from(*v) - d));
    }
    out
}

fn luminance(img: &Image, y: usize, x: usize) -> f64 {
    if img.channels() == 1 {
        f64::from(img.get(y, x, 0))
    } else {
        0.299 * f64::from(img.get(y, x, 0)) + 0.587 * f64::from(img.get(y, x, 1)) + 0.114 * f64::from(img.get(y, x, 2))
    }
}

pub fn contrast(img: &Image, f: f64) -> Image {
    if f == 1.0 {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            sum += luminance(img, y, x).round();
        }
    }
    let mean = (sum / (h * w) as f64).round();
    blend(img, &vec![mean; img.data().len()], f)
}

/// Saturation; grayscale images have none and pass through.
pub fn color(img: &Image, f: f64) -> Image {
    if img.channels() == 1 || f == 1.0 {
        return img.clone();
    }
    let mut gray = Vec::with_capacity(img.data().len());
    for y in 0..img.height() {
        for x in 0..img.width() {
            let l = luminance(img, y, x).round();
            gray.extend([l; 3]);
        }
    }
    blend(img, &gray, f)
}

pub fn brightness(img: &Image, f: f64) -> Image {
    blend(img, &vec![0.0; img.data().len()], f)
}

/// Blends against a 3×3 smoothing of the interior; the border is kept.
pub fn sharpness(img: &Image, f: f64) -> Image {
    if f == 1.0 {
        return img.clone();
    }
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let mut smooth: Vec<f64> = img.data().iter().map(|&v| f64::from(v)).collect();
    if h >= 3 && w >= 3 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                for c in 0..ch {
                    let mut s = 0.0;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let wgt = if dy == 1 && dx == 1 { 5.0 } else { 1.0 };
                            s += wgt * f64::from(img.get(y + dy - 1, x + dx - 1, c));
                        }
                    }
                    smooth[(y * w + x) * ch + c] = (s / 13.0).round();
                }
            }
        }
    }
    blend(img, &smooth, f)
}

/// Fills a `side`×`side` square centred at `(cy, cx)`, clipped to the image.
pub fn cutout(img: &Image, side: usize, cy: usize, cx: usize) -> Image {
    let mut out = img.clone();
    if side == 0 {
        return out;
    }
    let y0 = cy.saturating_sub(side / 2);
    let x0 = cx.saturating_sub(side / 2);
    let y1 = (cy + side - side / 2).min(img.height());
    let x1 = (cx + side - side / 2).min(img.width());
    for y in y0..y1 {
        for x in x0..x1 {
            for c in 0..img.channels() {
                out.set(y, x, c, FILL);
            }
        }
    }
    out
}

pub fn flip_horizontal(img: &Image) -> Image {
    let mut out = img.clone();
    let w = img.width();
    for y in 0..img.height() {
        for x in 0..w {
            for c in 0..img.channels() {
                out.set(y, x, c, img.get(y, w - 1 - x, c));
            }
        }
    }
    out
}

/// Zero-pads by `pad` on every side, then crops the original size at
/// offset `(dy, dx)` into the padded image.
pub fn pad_crop(img: &Image, pad: usize, dy: usize, dx: usize) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let sy = (y + dy) as isize - pad as isize;
            let sx = (x + dx) as isize - pad as isize;
            for c in 0..img.channels() {
                let v = if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    0
                } else {
                    img.get(sy as usize, sx as usize, c)
                };
                out.set(y, x, c, v);
            }
        }
    }
    out
}
