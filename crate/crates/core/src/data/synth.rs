//! Procedural glyph dataset: each class is a stroked shape, each example a
//! randomly rotated, shifted and dimmed copy of it.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, LabelledExample};
use crate::error::{config, Result};
use crate::rng::{self, Rng, Stream};
use crate::tensor::Tensor;

/// Class prototypes, in label order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Glyph {
    Ring,
    Plus,
    Cross,
    Square,
    Triangle,
    Tee,
    Ell,
    Equals,
    Vee,
    Zed,
}

impl Glyph {
    pub const ALL: [Glyph; 10] = [
        Glyph::Ring,
        Glyph::Plus,
        Glyph::Cross,
        Glyph::Square,
        Glyph::Triangle,
        Glyph::Tee,
        Glyph::Ell,
        Glyph::Equals,
        Glyph::Vee,
        Glyph::Zed,
    ];

    /// Stroke segments in `[-1, 1]²`, x right and y down.
    fn segments(self) -> Vec<[(f64, f64); 2]> {
        let poly = |pts: &[(f64, f64)], closed: bool| {
            let mut segs: Vec<[(f64, f64); 2]> = pts.windows(2).map(|w| [w[0], w[1]]).collect();
            if closed {
                segs.push([pts[pts.len() - 1], pts[0]]);
            }
            segs
        };
        match self {
            Glyph::Ring => Vec::new(),
            Glyph::Plus => vec![[(-0.6, 0.0), (0.6, 0.0)], [(0.0, -0.6), (0.0, 0.6)]],
            Glyph::Cross => vec![[(-0.5, -0.5), (0.5, 0.5)], [(-0.5, 0.5), (0.5, -0.5)]],
            Glyph::Square => poly(&[(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)], true),
            Glyph::Triangle => poly(&[(0.0, -0.6), (0.55, 0.45), (-0.55, 0.45)], true),
            Glyph::Tee => vec![[(-0.55, -0.5), (0.55, -0.5)], [(0.0, -0.5), (0.0, 0.6)]],
            Glyph::Ell => poly(&[(-0.4, -0.6), (-0.4, 0.5), (0.5, 0.5)], false),
            Glyph::Equals => vec![
                [(-0.55, -0.25), (0.55, -0.25)],
                [(-0.55, 0.25), (0.55, 0.25)],
            ],
            Glyph::Vee => poly(&[(-0.5, -0.55), (0.0, 0.55), (0.5, -0.55)], false),
            Glyph::Zed => poly(&[(-0.5, -0.5), (0.5, -0.5), (-0.5, 0.5), (0.5, 0.5)], false),
        }
    }

    fn distance(self, x: f64, y: f64) -> f64 {
        if self == Glyph::Ring {
            return ((x * x + y * y).sqrt() - 0.55).abs();
        }
        self.segments()
            .iter()
            .map(|&[(ax, ay), (bx, by)]| {
                let (dx, dy) = (bx - ax, by - ay);
                let t = (((x - ax) * dx + (y - ay) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
                ((x - ax - t * dx).powi(2) + (y - ay - t * dy).powi(2)).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Anti-aliased raster, values in `[0, 1]`.
    pub fn render(self, height: usize, width: usize, stroke: f64) -> Vec<f64> {
        let px = 2.0 / height.min(width) as f64;
        let mut out = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                let y = (i as f64 + 0.5) / height as f64 * 2.0 - 1.0;
                let x = (j as f64 + 0.5) / width as f64 * 2.0 - 1.0;
                let d = self.distance(x, y);
                out.push((1.0 - (d - stroke) / px).clamp(0.0, 1.0));
            }
        }
        out
    }
}

fn default_side() -> usize {
    16
}
fn default_rotation() -> f64 {
    20.0
}
fn default_shift() -> usize {
    2
}
fn default_intensity() -> [f64; 2] {
    [0.6, 1.0]
}
fn default_stroke() -> f64 {
    0.12
}
fn default_train() -> usize {
    2000
}
fn default_test() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    /// Rotation drawn uniformly from `±max_rotation_deg`.
    #[serde(default = "default_rotation")]
    pub max_rotation_deg: f64,
    /// Integer translation drawn uniformly from `-max_shift..=max_shift` per axis.
    #[serde(default = "default_shift")]
    pub max_shift: usize,
    /// Intensity multiplier range.
    #[serde(default = "default_intensity")]
    pub intensity: [f64; 2],
    /// Stroke half-width in normalised units (image spans 2).
    #[serde(default = "default_stroke")]
    pub stroke: f64,
    /// Standard deviation of additive pixel noise, clipped to `[0, 1]`.
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "default_train")]
    pub train: usize,
    #[serde(default)]
    pub validation: usize,
    #[serde(default = "default_test")]
    pub test: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            height: default_side(),
            width: default_side(),
            max_rotation_deg: default_rotation(),
            max_shift: default_shift(),
            intensity: default_intensity(),
            stroke: default_stroke(),
            noise: 0.0,
            train: default_train(),
            validation: 0,
            test: default_test(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=Glyph::ALL.len()).contains(&self.num_classes) {
            return Err(config(format!(
                "synthetic data supports 1 to 10 classes, got {}",
                self.num_classes
            )));
        }
        if self.height < 4 || self.width < 4 {
            return Err(config("synthetic images must be at least 4x4"));
        }
        let [lo, hi] = self.intensity;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(config("intensity range must satisfy 0 < lo <= hi <= 1"));
        }
        let finite = [self.max_rotation_deg, self.stroke, self.noise];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) || self.stroke == 0.0 {
            return Err(config(
                "rotation, stroke and noise must be finite and non-negative, stroke positive",
            ));
        }
        Ok(())
    }
}

/// Rotates about the image centre by `angle` radians with bilinear
/// resampling, then shifts by `(dy, dx)` pixels. Outside samples are zero.
pub(crate) fn transform(
    src: &[f64],
    height: usize,
    width: usize,
    angle: f64,
    dy: isize,
    dx: isize,
) -> Vec<f64> {
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let at = |i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= height as isize || j >= width as isize {
            0.0
        } else {
            src[i as usize * width + j as usize]
        }
    };
    let mut out = vec![0.0; height * width];
    for i in 0..height as isize {
        for j in 0..width as isize {
            let (oy, ox) = ((i - dy) as f64 - cy, (j - dx) as f64 - cx);
            // inverse rotation maps the output pixel back into the source
            let sy = cos * oy - sin * ox + cy;
            let sx = sin * oy + cos * ox + cx;
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
            out[i as usize * width + j as usize] = v;
        }
    }
    out
}

fn sample_example(
    spec: &SyntheticSpec,
    prototypes: &[Vec<f64>],
    id: u64,
    label: usize,
    rng: &mut Rng,
) -> LabelledExample {
    let angle = if spec.max_rotation_deg > 0.0 {
        rng.random_range(-spec.max_rotation_deg..=spec.max_rotation_deg)
            .to_radians()
    } else {
        0.0
    };
    let s = spec.max_shift as i64;
    let dy = rng.random_range(-s..=s) as isize;
    let dx = rng.random_range(-s..=s) as isize;
    let [lo, hi] = spec.intensity;
    let scale = if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    };
    let mut pixels = transform(&prototypes[label], spec.height, spec.width, angle, dy, dx);
    pixels.iter_mut().for_each(|p| *p *= scale);
    if spec.noise > 0.0 {
        let noise = rng::standard_normal(rng, pixels.len());
        for (p, n) in pixels.iter_mut().zip(noise) {
            *p = (*p + spec.noise * n).clamp(0.0, 1.0);
        }
    }
    LabelledExample {
        id,
        label,
        image: Tensor::new(vec![1, spec.height, spec.width], pixels).expect("finite pixels"),
    }
}

/// Generates train, validation and test examples. Labels cycle through the
/// classes; ids run consecutively across the three splits.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<DatasetSplit> {
    spec.validate()?;
    let prototypes: Vec<Vec<f64>> = Glyph::ALL[..spec.num_classes]
        .iter()
        .map(|g| g.render(spec.height, spec.width, spec.stroke))
        .collect();
    let mut rng = rng::stream(spec.seed, Stream::Data);
    let mut next_id = 0u64;
    let mut make = |count: usize, rng: &mut Rng| -> Vec<LabelledExample> {
        (0..count)
            .map(|i| {
                let e = sample_example(spec, &prototypes, next_id, i % spec.num_classes, rng);
                next_id += 1;
                e
            })
            .collect()
    };
    let train = make(spec.train, &mut rng);
    let validation = make(spec.validation, &mut rng);
    let test = make(spec.test, &mut rng);
    Ok(DatasetSplit {
        train_labelled: train,
        train_unlabelled: Vec::new(),
        validation,
        test,
    })
}
