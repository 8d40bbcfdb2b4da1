//! Deterministic synthetic shape scenes.
//!
//! Three labelled classes (box, ellipse, triangle) drawn with a 3 : 2 : 1
//! mixture on a noisy background, plus an unlabelled ring used as an
//! out-of-distribution object.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub const GENERATOR_VERSION: &str = "evidet-synth/1";
pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["box-vehicle", "disc-person", "triangle-cycle"];
/// Relative frequency of each class.
pub const CLASS_MIXTURE: [u32; NUM_CLASSES] = [3, 2, 1];

const BACKGROUND_MEAN: f64 = 0.2;
const NOISE_SD: f64 = 0.05;
const PLACEMENT_TRIES: usize = 30;
const PLACEMENT_MARGIN: f64 = 2.0;

#[derive(Debug, Clone, Copy)]
struct ShapeSpec {
    width: (f64, f64),
    height: (f64, f64),
    intensity: f64,
}

const SHAPES: [ShapeSpec; NUM_CLASSES] = [
    ShapeSpec {
        width: (20.0, 36.0),
        height: (12.0, 24.0),
        intensity: 0.85,
    },
    ShapeSpec {
        width: (10.0, 18.0),
        height: (18.0, 34.0),
        intensity: 0.6,
    },
    ShapeSpec {
        width: (14.0, 28.0),
        height: (14.0, 28.0),
        intensity: 0.45,
    },
];

const RING_DIAMETER: (f64, f64) = (18.0, 30.0);
const RING_THICKNESS: f64 = 3.0;
const RING_INTENSITY: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub max_objects: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            max_objects: 6,
        }
    }
}

/// One labelled object; centre and size in input pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub cls: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl ObjectAnnotation {
    /// `(x1, y1, x2, y2)`.
    pub fn bbox(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }
}

/// An object of a category never seen in training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodObject {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneAnnotation {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<ObjectAnnotation>,
    pub ood_objects: Vec<OodObject>,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Class(usize),
    Ring,
}

fn sample_class<R: Rng>(rng: &mut R) -> usize {
    let total: u32 = CLASS_MIXTURE.iter().sum();
    let mut draw = rng.random_range(0..total);
    for (cls, &weight) in CLASS_MIXTURE.iter().enumerate() {
        if draw < weight {
            return cls;
        }
        draw -= weight;
    }
    unreachable!("draw below mixture total")
}

fn inside(shape: Shape, cx: f64, cy: f64, w: f64, h: f64, px: f64, py: f64) -> bool {
    let (dx, dy) = (px - cx, py - cy);
    match shape {
        Shape::Class(0) => dx.abs() <= w / 2.0 && dy.abs() <= h / 2.0,
        Shape::Class(1) => {
            let (ex, ey) = (dx / (w / 2.0), dy / (h / 2.0));
            ex * ex + ey * ey <= 1.0
        }
        Shape::Class(_) => {
            // apex at the top centre, base along the bottom edge
            let top = cy - h / 2.0;
            let depth = py - top;
            (0.0..=h).contains(&depth) && dx.abs() <= (w / 2.0) * depth / h
        }
        Shape::Ring => {
            let r = (dx * dx + dy * dy).sqrt();
            let outer = w / 2.0;
            r <= outer && r >= outer - RING_THICKNESS
        }
    }
}

fn overlaps(a: [f64; 4], b: [f64; 4]) -> bool {
    a[0] < b[2] + PLACEMENT_MARGIN
        && b[0] < a[2] + PLACEMENT_MARGIN
        && a[1] < b[3] + PLACEMENT_MARGIN
        && b[1] < a[3] + PLACEMENT_MARGIN
}

/// Renders the scene for `seed`. With `ood` set, the first drawn shape is
/// replaced by a ring (one is added if the draw was empty); rings are listed
/// in `ood_objects` only.
pub fn render_scene(seed: u64, ood: bool, config: &SceneConfig) -> (Tensor, SceneAnnotation) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (width, height) = (config.width as f64, config.height as f64);
    let mut count = rng.random_range(0..=config.max_objects);
    if ood && count == 0 {
        count = 1;
    }

    let mut placed: Vec<(Shape, [f64; 4])> = Vec::with_capacity(count);
    for slot in 0..count {
        let shape = if ood && slot == 0 {
            Shape::Ring
        } else {
            Shape::Class(sample_class(&mut rng))
        };
        let (w, h) = match shape {
            Shape::Class(c) => (
                rng.random_range(SHAPES[c].width.0..=SHAPES[c].width.1),
                rng.random_range(SHAPES[c].height.0..=SHAPES[c].height.1),
            ),
            Shape::Ring => {
                let d = rng.random_range(RING_DIAMETER.0..=RING_DIAMETER.1);
                (d, d)
            }
        };
        for _ in 0..PLACEMENT_TRIES {
            let cx = rng.random_range(w / 2.0..=width - w / 2.0);
            let cy = rng.random_range(h / 2.0..=height - h / 2.0);
            let bbox = [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0];
            if placed.iter().all(|(_, other)| !overlaps(bbox, *other)) {
                placed.push((shape, bbox));
                break;
            }
        }
    }

    let background = Normal::new(BACKGROUND_MEAN, NOISE_SD).expect("valid normal");
    let noise = Normal::new(0.0, NOISE_SD).expect("valid normal");
    let mut pixels = vec![0.0; config.width * config.height];
    for y in 0..config.height {
        for x in 0..config.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let fill = placed.iter().find_map(|&(shape, b)| {
                let (cx, cy, w, h) = ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0, b[2] - b[0], b[3] - b[1]);
                inside(shape, cx, cy, w, h, px, py).then_some(match shape {
                    Shape::Class(c) => SHAPES[c].intensity,
                    Shape::Ring => RING_INTENSITY,
                })
            });
            let value = match fill {
                Some(level) => level + noise.sample(&mut rng),
                None => background.sample(&mut rng),
            };
            // stored images are f32; keep the in-memory scene identical
            pixels[y * config.width + x] = value.clamp(0.0, 1.0) as f32 as f64;
        }
    }

    let mut annotation = SceneAnnotation {
        id: format!("scene-{seed:016x}"),
        width: config.width,
        height: config.height,
        objects: Vec::new(),
        ood_objects: Vec::new(),
    };
    for (shape, b) in placed {
        let (cx, cy, w, h) = ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0, b[2] - b[0], b[3] - b[1]);
        match shape {
            Shape::Class(cls) => annotation.objects.push(ObjectAnnotation { cls, cx, cy, w, h }),
            Shape::Ring => annotation.ood_objects.push(OodObject { cx, cy, w, h }),
        }
    }
    let image = Tensor::new(vec![1, config.height, config.width], pixels).expect("image shape");
    (image, annotation)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        let (a, ann_a) = render_scene(42, true, &cfg);
        let (b, ann_b) = render_scene(42, true, &cfg);
        assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(ann_a, ann_b);
    }

    #[test]
    fn empty_draw_gives_pure_noise() {
        let cfg = SceneConfig::default();
        let seed = (0..1000u64)
            .find(|&s| render_scene(s, false, &cfg).1.objects.is_empty())
            .expect("some seed draws zero objects");
        let (image, ann) = render_scene(seed, false, &cfg);
        assert!(ann.objects.is_empty() && ann.ood_objects.is_empty());
        let mean = image.data().iter().sum::<f64>() / image.len() as f64;
        assert!((mean - BACKGROUND_MEAN).abs() < 0.01);
        assert!(image.data().iter().all(|&v| v < BACKGROUND_MEAN + 6.0 * NOISE_SD));
    }

    #[test]
    fn boxes_stay_inside_and_counts_bounded() {
        let cfg = SceneConfig::default();
        for seed in 0..200 {
            let (_, ann) = render_scene(seed, seed % 3 == 0, &cfg);
            assert!(ann.objects.len() + ann.ood_objects.len() <= cfg.max_objects);
            for o in &ann.objects {
                let b = o.bbox();
                assert!(b[0] >= 0.0 && b[1] >= 0.0 && b[2] <= 128.0 && b[3] <= 128.0);
                assert!(o.cls < NUM_CLASSES);
            }
        }
    }

    #[test]
    fn ood_scene_has_exactly_one_ring() {
        let cfg = SceneConfig::default();
        for seed in 0..50 {
            let (_, ann) = render_scene(seed, true, &cfg);
            assert!(ann.ood_objects.len() <= 1);
            let (_, plain) = render_scene(seed, false, &cfg);
            assert!(plain.ood_objects.is_empty());
        }
        let rings: usize = (0..50).map(|s| render_scene(s, true, &cfg).1.ood_objects.len()).sum();
        assert!(rings >= 45, "ring placement failed too often: {rings}");
    }

    #[test]
    fn class_mixture_over_500_seeds() {
        let cfg = SceneConfig::default();
        let mut counts = [0usize; NUM_CLASSES];
        for seed in 0..500 {
            for o in render_scene(seed, false, &cfg).1.objects {
                counts[o.cls] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let weight_sum: u32 = CLASS_MIXTURE.iter().sum();
        for cls in 0..NUM_CLASSES {
            let expected = total as f64 * CLASS_MIXTURE[cls] as f64 / weight_sum as f64;
            let rel = (counts[cls] as f64 - expected).abs() / expected;
            assert!(rel <= 0.10, "class {cls}: {} vs expected {expected:.1}", counts[cls]);
        }
    }
}
