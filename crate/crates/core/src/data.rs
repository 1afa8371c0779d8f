//! Labeled image datasets and a procedural handwritten-digit generator that
//! produces MNIST-format data (28×28, 8-bit, digits 0–9).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Scalar, Tensor};

pub const DIGIT_SIDE: usize = 28;
pub const NUM_DIGITS: usize = 10;

/// Images `[n, c, h, w]` in `[0, 1]` with one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self, String> {
        if images.rank() != 4 {
            return Err(format!("expected [n, c, h, w] images, got {:?}", images.shape()));
        }
        if images.rows() != labels.len() {
            return Err(format!("{} images but {} labels", images.rows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(format!("label {bad} outside 0..{classes}"));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[c, h, w]` of a single image.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn image<S: Scalar>(&self, i: usize) -> Tensor<S> {
        self.images.index_row(i).expect("index in range").cast()
    }

    pub fn batch<S: Scalar>(&self, idx: &[usize]) -> (Tensor<S>, Vec<usize>) {
        let x = self.images.select_rows(idx).expect("indices in range").cast();
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let (images, labels) = self.batch::<f32>(idx);
        Self {
            images,
            labels,
            classes: self.classes,
        }
    }

    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Index of the first image carrying `label`.
    pub fn first_of_class(&self, label: usize) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }

    /// Index of the `k`-th image (0-based) carrying `label`.
    pub fn nth_of_class(&self, label: usize, k: usize) -> Option<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .nth(k)
            .map(|(i, _)| i)
    }
}

type Stroke = Vec<[f64; 2]>;

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from_deg: f64, to_deg: f64) -> Stroke {
    let steps = 24;
    (0..=steps)
        .map(|i| {
            let t = (from_deg + (to_deg - from_deg) * i as f64 / steps as f64).to_radians();
            [cx + rx * t.cos(), cy + ry * t.sin()]
        })
        .collect()
}

/// Stroke skeletons in a unit box, `y` pointing down.
fn glyph(digit: usize) -> Vec<Stroke> {
    match digit {
        0 => vec![arc(0.5, 0.5, 0.3, 0.42, 0.0, 360.0)],
        1 => vec![vec![[0.34, 0.24], [0.54, 0.08], [0.54, 0.92]]],
        2 => {
            let mut s = arc(0.5, 0.32, 0.26, 0.24, 190.0, 380.0);
            s.extend([[0.22, 0.92], [0.82, 0.92]]);
            vec![s]
        }
        3 => vec![arc(0.47, 0.3, 0.25, 0.21, 200.0, 450.0), arc(0.47, 0.71, 0.28, 0.21, 270.0, 520.0)],
        4 => vec![vec![[0.66, 0.92], [0.66, 0.08], [0.18, 0.64], [0.84, 0.64]]],
        5 => {
            let mut s = vec![[0.78, 0.08], [0.3, 0.08], [0.27, 0.46]];
            s.extend(arc(0.5, 0.66, 0.27, 0.25, 230.0, 500.0));
            vec![s]
        }
        6 => vec![
            vec![[0.72, 0.08], [0.46, 0.28], [0.28, 0.6]],
            arc(0.5, 0.68, 0.23, 0.23, 0.0, 360.0),
        ],
        7 => vec![vec![[0.18, 0.08], [0.82, 0.08], [0.42, 0.92]]],
        8 => vec![arc(0.5, 0.29, 0.2, 0.2, 0.0, 360.0), arc(0.5, 0.7, 0.25, 0.22, 0.0, 360.0)],
        9 => vec![
            arc(0.5, 0.32, 0.23, 0.23, 0.0, 360.0),
            vec![[0.73, 0.32], [0.64, 0.92]],
        ],
        _ => unreachable!("digit {digit}"),
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (vx, vy) = (b[0] - a[0], b[1] - a[1]);
    let (wx, wy) = (p[0] - a[0], p[1] - a[1]);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Renders one 28×28 digit as 8-bit pixels with random slant, scale, offset,
/// stroke width and per-vertex wobble.
pub fn render_digit<R: Rng + ?Sized>(digit: usize, rng: &mut R) -> Vec<u8> {
    let scale = rng.gen_range(0.82..1.05);
    let aspect = rng.gen_range(0.8..1.1);
    let shear = rng.gen_range(-0.3..0.3);
    let rot = rng.gen_range(-0.18f64..0.18);
    let (sn, cs) = rot.sin_cos();
    let (ox, oy) = (rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
    let width = rng.gen_range(1.1..2.2);
    let wobble = 0.025;
    let side = DIGIT_SIDE as f64;
    let box_size = 20.0 * scale;
    let strokes: Vec<Stroke> = glyph(digit)
        .into_iter()
        .map(|s| {
            s.into_iter()
                .map(|[u, v]| {
                    let u = u + rng.gen_range(-wobble..wobble) - 0.5;
                    let v = v + rng.gen_range(-wobble..wobble) - 0.5;
                    let u = (u + shear * -v) * aspect;
                    let (x, y) = (cs * u - sn * v, sn * u + cs * v);
                    [side / 2.0 + ox + x * box_size, side / 2.0 + oy + y * box_size]
                })
                .collect()
        })
        .collect();
    let mut out = vec![0u8; DIGIT_SIDE * DIGIT_SIDE];
    for py in 0..DIGIT_SIDE {
        for px in 0..DIGIT_SIDE {
            let p = [px as f64 + 0.5, py as f64 + 0.5];
            let d = strokes
                .iter()
                .flat_map(|s| s.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            let v = (width - d + 0.5).clamp(0.0, 1.0);
            out[py * DIGIT_SIDE + px] = (v * 255.0).round() as u8;
        }
    }
    out
}

/// `n` rendered digits with labels cycling through 0–9 in a shuffled order.
pub fn synthetic_digits_raw(n: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * DIGIT_SIDE * DIGIT_SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = if i < NUM_DIGITS { i } else { rng.gen_range(0..NUM_DIGITS) };
        pixels.extend(render_digit(digit, &mut rng));
        labels.push(digit as u8);
    }
    (pixels, labels)
}

/// Converts 8-bit pixels (`v / 255`) and labels into a dataset.
pub fn from_u8(pixels: &[u8], labels: &[u8], rows: usize, cols: usize) -> Result<Dataset, String> {
    let n = labels.len();
    if pixels.len() != n * rows * cols {
        return Err(format!("{} pixels for {n} images of {rows}x{cols}", pixels.len()));
    }
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let images = Tensor::new(&[n, 1, rows, cols], data).map_err(|e| e.to_string())?;
    Dataset::new(images, labels.iter().map(|&l| l as usize).collect(), NUM_DIGITS)
}

pub fn synthetic_digits(n: usize, seed: u64) -> Dataset {
    let (p, l) = synthetic_digits_raw(n, seed);
    from_u8(&p, &l, DIGIT_SIDE, DIGIT_SIDE).expect("generator output is consistent")
}
