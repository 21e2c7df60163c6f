//! Procedural toy artworks for training and demos.
//!
//! Each image is a palette wash plus one to four geometric shapes. Images
//! alternate between two disjoint style families: even indices are
//! warm-palette "oil" pieces with texture grain, odd indices are
//! cool-palette "ink" pieces left smooth. All values land in `[0, 1]` and
//! everything is a pure function of `(count, resolution, seed)`.

use ndarray::Array4;

use crate::rng::{derive_seed, Xoshiro256PlusPlus};
use crate::tensor::ImageTensor;

const TAG_DATASET: u64 = 0x6461_7461;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StyleFamily {
    WarmOil,
    CoolInk,
}

/// Family of the image at a dataset index.
pub fn style_family_of(index: usize) -> StyleFamily {
    if index % 2 == 0 {
        StyleFamily::WarmOil
    } else {
        StyleFamily::CoolInk
    }
}

fn palette_color(rng: &mut Xoshiro256PlusPlus, family: StyleFamily) -> [f64; 3] {
    match family {
        StyleFamily::WarmOil => [
            rng.uniform_in(0.60, 1.00),
            rng.uniform_in(0.25, 0.70),
            rng.uniform_in(0.05, 0.40),
        ],
        StyleFamily::CoolInk => [
            rng.uniform_in(0.05, 0.40),
            rng.uniform_in(0.30, 0.75),
            rng.uniform_in(0.60, 1.00),
        ],
    }
}

struct Canvas {
    data: Vec<f64>,
    res: usize,
}

impl Canvas {
    fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.res + y) * self.res + x] = v;
    }
    fn add(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.res + y) * self.res + x] += v;
    }
}

fn paint_disk(canvas: &mut Canvas, rng: &mut Xoshiro256PlusPlus, color: [f64; 3]) {
    let res = canvas.res as f64;
    let cx = rng.uniform_in(0.15, 0.85) * res;
    let cy = rng.uniform_in(0.15, 0.85) * res;
    let r = rng.uniform_in(0.08, 0.28) * res;
    for y in 0..canvas.res {
        for x in 0..canvas.res {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= r * r {
                for (c, &v) in color.iter().enumerate() {
                    canvas.set(c, y, x, v);
                }
            }
        }
    }
}

fn paint_stripe(canvas: &mut Canvas, rng: &mut Xoshiro256PlusPlus, color: [f64; 3]) {
    let res = canvas.res;
    let horizontal = rng.next_u64() & 1 == 0;
    let pos = rng.uniform_in(0.10, 0.90);
    let width = rng.uniform_in(0.05, 0.20);
    let lo = ((pos - width / 2.0) * res as f64).max(0.0) as usize;
    let hi = (((pos + width / 2.0) * res as f64) as usize).min(res - 1);
    for a in lo..=hi {
        for b in 0..res {
            let (y, x) = if horizontal { (a, b) } else { (b, a) };
            for (c, &v) in color.iter().enumerate() {
                canvas.set(c, y, x, v);
            }
        }
    }
}

fn paint_triangle(canvas: &mut Canvas, rng: &mut Xoshiro256PlusPlus, color: [f64; 3]) {
    let res = canvas.res as f64;
    let vx: Vec<(f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.uniform_in(0.05, 0.95) * res,
                rng.uniform_in(0.05, 0.95) * res,
            )
        })
        .collect();
    let sign = |p: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (p.0 - b.0) * (a.1 - b.1) - (a.0 - b.0) * (p.1 - b.1)
    };
    for y in 0..canvas.res {
        for x in 0..canvas.res {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let d1 = sign(p, vx[0], vx[1]);
            let d2 = sign(p, vx[1], vx[2]);
            let d3 = sign(p, vx[2], vx[0]);
            let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
            let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
            if !(has_neg && has_pos) {
                for (c, &v) in color.iter().enumerate() {
                    canvas.set(c, y, x, v);
                }
            }
        }
    }
}

/// Generate `count` procedural artworks at `resolution x resolution`.
pub fn make_synthetic_dataset(count: usize, resolution: usize, seed: u64) -> Vec<ImageTensor> {
    let base = derive_seed(seed, TAG_DATASET);
    (0..count)
        .map(|i| {
            let mut rng = Xoshiro256PlusPlus::new(derive_seed(base, i as u64));
            let family = style_family_of(i);
            let palette: Vec<[f64; 3]> = (0..3).map(|_| palette_color(&mut rng, family)).collect();

            let mut canvas = Canvas {
                data: vec![0.0; 3 * resolution * resolution],
                res: resolution,
            };
            // Background wash: gradient between the first two palette colors.
            let horizontal = rng.next_u64() & 1 == 0;
            for y in 0..resolution {
                for x in 0..resolution {
                    let t = if horizontal {
                        x as f64 / (resolution.max(2) - 1) as f64
                    } else {
                        y as f64 / (resolution.max(2) - 1) as f64
                    };
                    for c in 0..3 {
                        canvas.set(c, y, x, (1.0 - t) * palette[0][c] + t * palette[1][c]);
                    }
                }
            }
            let shapes = 1 + rng.below(4) as usize;
            for _ in 0..shapes {
                let color = palette[rng.below(3) as usize];
                match rng.below(3) {
                    0 => paint_disk(&mut canvas, &mut rng, color),
                    1 => paint_stripe(&mut canvas, &mut rng, color),
                    _ => paint_triangle(&mut canvas, &mut rng, color),
                }
            }
            if family == StyleFamily::WarmOil {
                for c in 0..3 {
                    for y in 0..resolution {
                        for x in 0..resolution {
                            canvas.add(c, y, x, rng.uniform_in(-0.04, 0.04));
                        }
                    }
                }
            }
            let data = Array4::from_shape_vec((1, 3, resolution, resolution), canvas.data)
                .expect("canvas size matches")
                .mapv(|v| v.clamp(0.0, 1.0));
            ImageTensor::new(data).expect("generator output is finite")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_stay_in_unit_range() {
        for img in make_synthetic_dataset(8, 16, 3) {
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn same_seed_reproduces_the_dataset() {
        let a = make_synthetic_dataset(6, 16, 42);
        let b = make_synthetic_dataset(6, 16, 42);
        assert_eq!(a, b);
        let c = make_synthetic_dataset(6, 16, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn warm_family_is_redder_than_cool() {
        let images = make_synthetic_dataset(100, 16, 7);
        let mut warm = (0.0, 0usize);
        let mut cool = (0.0, 0usize);
        for (i, img) in images.iter().enumerate() {
            let red_mean = img
                .data()
                .slice(ndarray::s![0, 0, .., ..])
                .mean()
                .unwrap();
            match style_family_of(i) {
                StyleFamily::WarmOil => {
                    warm.0 += red_mean;
                    warm.1 += 1;
                }
                StyleFamily::CoolInk => {
                    cool.0 += red_mean;
                    cool.1 += 1;
                }
            }
        }
        let warm_mean = warm.0 / warm.1 as f64;
        let cool_mean = cool.0 / cool.1 as f64;
        assert!(
            warm_mean > cool_mean,
            "warm {warm_mean} not above cool {cool_mean}"
        );
    }
}
