//! Procedural aerial-scene stand-ins.
//!
//! Each class is a parametric shape family rendered with a class palette.
//! Position, scale, phase, hue, lighting and sensor noise vary per image.
//! Every family is closed under quarter turns, so offline rotation never
//! turns one class into another.

use std::f64::consts::TAU;

use atnf_core::rng::RngKey;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ppm::RgbImage;

pub const FAMILIES: [&str; 16] = [
    "farmland",
    "residential",
    "lake",
    "roundabout",
    "intersection",
    "forest",
    "chessboard",
    "tanks",
    "pyramid",
    "terraces",
    "runway",
    "orchard",
    "plantation",
    "stadium",
    "coastline",
    "sheds",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
    /// Index of the first family used; class `c` renders family
    /// `family_offset + c`.
    pub family_offset: usize,
    /// Half-width of the per-image hue jitter around the class hue, in turns.
    pub hue_jitter: f64,
    /// Upper bound of the per-image Gaussian noise level.
    pub max_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            per_class: 100,
            size: 32,
            seed: 0,
            family_offset: 0,
            hue_jitter: 0.04,
            max_noise: 0.06,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Dataset("need at least 2 classes".into()));
        }
        if self.family_offset + self.classes > FAMILIES.len() {
            return Err(Error::Dataset(format!(
                "families {}..{} requested, {} available",
                self.family_offset,
                self.family_offset + self.classes,
                FAMILIES.len()
            )));
        }
        if self.size < 16 {
            return Err(Error::Dataset(format!("image size {} is below 16", self.size)));
        }
        if self.per_class == 0 {
            return Err(Error::Dataset("per_class must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.hue_jitter) || !(0.0..=0.5).contains(&self.max_noise) {
            return Err(Error::Dataset("hue_jitter and max_noise must lie in [0, 0.5]".into()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        FAMILIES[self.family_offset..self.family_offset + self.classes]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub class: usize,
    /// Position within its class.
    pub index: usize,
    pub image: RgbImage,
}

/// All images, class-major. Image `(c, i)` depends only on the seed, the
/// family and `i`, so subsets regenerate identically.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let root = RngKey::new(cfg.seed);
    let mut out = Vec::with_capacity(cfg.classes * cfg.per_class);
    for class in 0..cfg.classes {
        let family = cfg.family_offset + class;
        for index in 0..cfg.per_class {
            let key = root.derive(family as u64).derive(index as u64);
            out.push(Sample {
                class,
                index,
                image: render(family, cfg, key),
            });
        }
    }
    Ok(out)
}

type Mask = Box<dyn Fn(f64, f64) -> bool>;

fn u(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn frac(v: f64) -> f64 {
    v - v.floor()
}

/// Maps `(x, y)` through one of the four quarter turns about the centre.
fn turn(q: u32, x: f64, y: f64) -> (f64, f64) {
    match q % 4 {
        0 => (x, y),
        1 => (1.0 - y, x),
        2 => (1.0 - x, 1.0 - y),
        _ => (y, 1.0 - x),
    }
}

fn disks(rng: &mut impl Rng, n: usize, r: (f64, f64), ring: Option<f64>) -> Mask {
    let items: Vec<(f64, f64, f64)> = (0..n).map(|_| (u(rng, 0.0, 1.0), u(rng, 0.0, 1.0), u(rng, r.0, r.1))).collect();
    Box::new(move |x, y| {
        items.iter().any(|&(cx, cy, r)| {
            let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            match ring {
                Some(w) => (d - r).abs() < w / 2.0,
                None => d < r,
            }
        })
    })
}

fn shape(family: usize, rng: &mut impl Rng) -> Mask {
    match family {
        // parallel strips, either axis
        0 => {
            let (p, duty, phase, q) = (u(rng, 0.12, 0.25), u(rng, 0.35, 0.65), u(rng, 0.0, 1.0), rng.random_range(0..4));
            Box::new(move |x, y| frac(turn(q, x, y).0 / p + phase) < duty)
        }
        // grid of blocks
        1 => {
            let (p, s) = (u(rng, 0.18, 0.3), u(rng, 0.45, 0.7));
            let (px, py) = (u(rng, 0.0, 1.0), u(rng, 0.0, 1.0));
            Box::new(move |x, y| frac(x / p + px) < s && frac(y / p + py) < s)
        }
        // one wobbly blob
        2 => {
            let (cx, cy, r) = (u(rng, 0.3, 0.7), u(rng, 0.3, 0.7), u(rng, 0.18, 0.32));
            let (a, k, psi) = (u(rng, 0.0, 0.15), rng.random_range(3..6) as f64, u(rng, 0.0, TAU));
            Box::new(move |x, y| {
                let (dx, dy) = (x - cx, y - cy);
                (dx * dx + dy * dy).sqrt() < r * (1.0 + a * (k * dy.atan2(dx) + psi).sin())
            })
        }
        // single ring
        3 => {
            let (cx, cy) = (u(rng, 0.35, 0.65), u(rng, 0.35, 0.65));
            let (r, w) = (u(rng, 0.15, 0.3), u(rng, 0.05, 0.09));
            Box::new(move |x, y| (((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r).abs() < w / 2.0)
        }
        // crossing roads
        4 => {
            let (cx, cy, w) = (u(rng, 0.3, 0.7), u(rng, 0.3, 0.7), u(rng, 0.08, 0.15));
            Box::new(move |x, y| (x - cx).abs() < w / 2.0 || (y - cy).abs() < w / 2.0)
        }
        // scattered canopy
        5 => {
            let n = rng.random_range(14..26);
            disks(rng, n, (0.03, 0.06), None)
        }
        6 => {
            let p = u(rng, 0.15, 0.3);
            let (px, py) = (u(rng, 0.0, 1.0), u(rng, 0.0, 1.0));
            Box::new(move |x, y| ((x / p + px).floor() as i64 + (y / p + py).floor() as i64) % 2 == 0)
        }
        7 => {
            let n = rng.random_range(3..7);
            disks(rng, n, (0.06, 0.1), Some(0.035))
        }
        // triangle pointing along one of four directions
        8 => {
            let (cx, cy, s, q) = (u(rng, 0.35, 0.65), u(rng, 0.35, 0.65), u(rng, 0.3, 0.5), rng.random_range(0..4));
            Box::new(move |x, y| {
                let (x, y) = turn(q, x - cx + 0.5, y - cy + 0.5);
                let top = 0.5 - s / 2.0;
                y >= top && y <= 0.5 + s / 2.0 && (x - 0.5).abs() <= (y - top) / 2.0
            })
        }
        // nested square outlines
        9 => {
            let (cx, cy) = (u(rng, 0.35, 0.65), u(rng, 0.35, 0.65));
            let (p, r) = (u(rng, 0.07, 0.11), u(rng, 0.3, 0.45));
            Box::new(move |x, y| {
                let d = (x - cx).abs().max((y - cy).abs());
                d < r && frac(d / p) < 0.5
            })
        }
        // one band with centre-line dashes
        10 => {
            let (off, w, q) = (u(rng, 0.3, 0.7), u(rng, 0.12, 0.2), rng.random_range(0..4));
            let dash = u(rng, 0.08, 0.14);
            Box::new(move |x, y| {
                let (a, b) = turn(q, x, y);
                let d = (a - off).abs();
                d < w / 2.0 && !(d < w / 10.0 && frac(b / dash) < 0.5)
            })
        }
        // diagonal rows, either diagonal
        11 => {
            let (p, phase, sign) = (u(rng, 0.12, 0.22), u(rng, 0.0, 1.0), if rng.random() { 1.0 } else { -1.0 });
            Box::new(move |x, y| frac((x + sign * y) / (p * std::f64::consts::SQRT_2) + phase) < 0.5)
        }
        // regular dot lattice
        12 => {
            let (p, r) = (u(rng, 0.12, 0.2), u(rng, 0.025, 0.045));
            let (px, py) = (u(rng, 0.0, 1.0), u(rng, 0.0, 1.0));
            Box::new(move |x, y| {
                let dx = (frac(x / p + px) - 0.5) * p;
                let dy = (frac(y / p + py) - 0.5) * p;
                dx * dx + dy * dy < r * r
            })
        }
        // hollow square
        13 => {
            let (cx, cy) = (u(rng, 0.35, 0.65), u(rng, 0.35, 0.65));
            let (h, w) = (u(rng, 0.2, 0.35), u(rng, 0.05, 0.09));
            Box::new(move |x, y| {
                let d = (x - cx).abs().max((y - cy).abs());
                d <= h && d >= h - w
            })
        }
        // wavy land/water boundary entering from one side
        14 => {
            let (a, f, psi, q) = (u(rng, 0.05, 0.12), u(rng, 1.0, 3.0), u(rng, 0.0, TAU), rng.random_range(0..4));
            let level = u(rng, 0.35, 0.65);
            Box::new(move |x, y| {
                let (s, t) = turn(q, x, y);
                t < level + a * (TAU * f * s + psi).sin()
            })
        }
        // scattered small roofs
        _ => {
            let n = rng.random_range(3..7);
            let items: Vec<(f64, f64, f64)> = (0..n).map(|_| (u(rng, 0.0, 1.0), u(rng, 0.0, 1.0), u(rng, 0.04, 0.08))).collect();
            Box::new(move |x, y| items.iter().any(|&(cx, cy, h)| (x - cx).abs() < h && (y - cy).abs() < h))
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = frac(h) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Class hues spread by the golden angle.
fn class_hue(family: usize) -> f64 {
    frac(family as f64 * 0.618_033_988_75)
}

fn render(family: usize, cfg: &SynthConfig, key: RngKey) -> RgbImage {
    let mut rng = key.rng();
    let mask = shape(family, &mut rng);
    let hue = class_hue(family) + u(&mut rng, -cfg.hue_jitter, cfg.hue_jitter + 1e-9);
    let bg_v = u(&mut rng, 0.3, 0.7);
    let fg_v = if rng.random() {
        (bg_v + u(&mut rng, 0.2, 0.35)).min(1.0)
    } else {
        (bg_v - u(&mut rng, 0.2, 0.35)).max(0.05)
    };
    let bg = hsv(hue, u(&mut rng, 0.2, 0.6), bg_v);
    let fg = hsv(hue + u(&mut rng, -0.08, 0.08), u(&mut rng, 0.3, 0.8), fg_v);
    let light = (u(&mut rng, -0.08, 0.08), u(&mut rng, -0.08, 0.08));
    let sigma = u(&mut rng, 0.0, cfg.max_noise + 1e-9);
    let noise = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");

    let n = cfg.size;
    let step = 1.0 / n as f64;
    let mut data = Vec::with_capacity(n * n * 3);
    for row in 0..n {
        for col in 0..n {
            // 2×2 supersampled coverage
            let mut cover = 0.0;
            for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                cover += mask((col as f64 + sx) * step, (row as f64 + sy) * step) as u8 as f64;
            }
            cover /= 4.0;
            let (x, y) = ((col as f64 + 0.5) * step - 0.5, (row as f64 + 0.5) * step - 0.5);
            let shade = light.0 * x + light.1 * y;
            for ch in 0..3 {
                let v = bg[ch] * (1.0 - cover) + fg[ch] * cover + shade + noise.sample(&mut rng);
                data.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    RgbImage::new(n, n, data).expect("buffer sized from dimensions")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_determinism() {
        let cfg = SynthConfig {
            per_class: 3,
            ..SynthConfig::default()
        };
        let a = generate(&cfg).unwrap();
        assert_eq!(a.len(), 18);
        assert_eq!(a.iter().filter(|s| s.class == 5).count(), 3);
        assert_eq!(a, generate(&cfg).unwrap());
        let b = generate(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a[0].image, b[0].image);
    }

    #[test]
    fn rejects_bad_dimensions() {
        let bad = [
            SynthConfig {
                classes: 1,
                ..SynthConfig::default()
            },
            SynthConfig {
                size: 8,
                ..SynthConfig::default()
            },
            SynthConfig {
                per_class: 0,
                ..SynthConfig::default()
            },
            SynthConfig {
                classes: 10,
                family_offset: 8,
                ..SynthConfig::default()
            },
        ];
        for cfg in bad {
            assert!(generate(&cfg).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn quarter_turns_compose() {
        let (x, y) = (0.2, 0.7);
        let mut p = (x, y);
        for _ in 0..4 {
            p = turn(1, p.0, p.1);
        }
        assert!((p.0 - x).abs() < 1e-12 && (p.1 - y).abs() < 1e-12);
    }
}
