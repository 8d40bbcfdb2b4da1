//! Ground-truth construction on the downsampled output grid.

use crate::error::{Error, Result};
use crate::synth::SceneAnnotation;
use crate::tensor::Tensor;

/// Minimum IoU a box displaced by the Gaussian radius must keep with the
/// ground truth.
const MIN_OVERLAP: f64 = 0.7;

/// Output grid geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl Grid {
    pub fn for_image(classes: usize, image_height: usize, image_width: usize, stride: usize) -> Result<Self> {
        if stride == 0 || !image_height.is_multiple_of(stride) || !image_width.is_multiple_of(stride) {
            return Err(Error::validation(format!(
                "stride {stride} must divide the image size {image_height}x{image_width}"
            )));
        }
        Ok(Self {
            classes,
            height: image_height / stride,
            width: image_width / stride,
            stride,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Regression target at one object-centre pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterTarget {
    pub class: usize,
    /// `row * grid.width + col`.
    pub pixel: usize,
    /// Box width and height in grid units.
    pub size: [f64; 2],
    /// Sub-pixel offset of the true centre, each component in `[0, 1)`.
    pub offset: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct TrainingSample {
    /// `[1, H, W]`.
    pub image: Tensor,
    pub grid: Grid,
    /// Gaussian heatmap `[classes, h, w]`; exactly 1 at object centres.
    pub heatmap: Tensor,
    /// `[classes, h, w, 2]`; `[0, 1]` at centres, `[1, 0]` elsewhere.
    pub onehot: Tensor,
    /// Width/height in grid units, `[2, h, w]`, zero away from centres.
    pub size: Tensor,
    /// `[2, h, w]`, zero away from centres.
    pub offset: Tensor,
    /// One entry per distinct (class, pixel) centre.
    pub centers: Vec<CenterTarget>,
    /// Distinct pixels carrying size and offset targets, ascending.
    pub object_pixels: Vec<usize>,
}

impl TrainingSample {
    pub fn is_center(&self, class: usize, pixel: usize) -> bool {
        self.heatmap.data()[class * self.grid.pixels() + pixel] == 1.0
    }
}

/// Gaussian radius (in grid cells) for a box of the given grid-unit size so
/// that corners jittered within it keep IoU >= 0.7 with the truth.
pub fn gaussian_radius(height: f64, width: f64) -> f64 {
    let b1 = height + width;
    let c1 = width * height * (1.0 - MIN_OVERLAP) / (1.0 + MIN_OVERLAP);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;

    let b2 = 2.0 * (height + width);
    let c2 = (1.0 - MIN_OVERLAP) * width * height;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;

    let a3 = 4.0 * MIN_OVERLAP;
    let b3 = -2.0 * MIN_OVERLAP * (height + width);
    let c3 = (MIN_OVERLAP - 1.0) * width * height;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;

    r1.min(r2).min(r3)
}

/// Max-merges a `(2r+1)²` Gaussian with sigma `(2r+1)/6` into one heatmap plane.
fn draw_gaussian(plane: &mut [f64], grid: &Grid, row: usize, col: usize, radius: usize) {
    let sigma = (2 * radius + 1) as f64 / 6.0;
    let r = radius as isize;
    for dy in -r..=r {
        for dx in -r..=r {
            let (y, x) = (row as isize + dy, col as isize + dx);
            if y < 0 || x < 0 || y >= grid.height as isize || x >= grid.width as isize {
                continue;
            }
            let g = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            if g < f64::EPSILON {
                continue;
            }
            let cell = &mut plane[y as usize * grid.width + x as usize];
            *cell = cell.max(g);
        }
    }
}

/// Builds all training targets for one annotated scene.
///
/// Objects whose centres fall on the same grid cell share a single regression
/// entry: the larger box (by area) wins.
pub fn build_targets(image: Tensor, ann: &SceneAnnotation, classes: usize, stride: usize) -> Result<TrainingSample> {
    let grid = Grid::for_image(classes, ann.height, ann.width, stride)?;
    if image.shape() != [1, ann.height, ann.width] {
        return Err(Error::Shape {
            op: "build_targets",
            shapes: vec![image.shape().to_vec(), vec![1, ann.height, ann.width]],
        });
    }
    let hw = grid.pixels();
    let mut heatmap = vec![0.0; classes * hw];
    let mut size = vec![0.0; 2 * hw];
    let mut offset = vec![0.0; 2 * hw];
    let mut area = vec![0.0f64; hw];
    let mut centers: Vec<CenterTarget> = Vec::new();

    for obj in &ann.objects {
        if obj.cls >= classes {
            return Err(Error::validation(format!("class {} outside 0..{classes}", obj.cls)));
        }
        let (gx, gy) = (obj.cx / stride as f64, obj.cy / stride as f64);
        let (col, row) = (gx.floor(), gy.floor());
        if !(gx >= 0.0 && gy >= 0.0 && col < grid.width as f64 && row < grid.height as f64) {
            return Err(Error::validation(format!(
                "object centre ({}, {}) lies outside the {}x{} image",
                obj.cx, obj.cy, ann.width, ann.height
            )));
        }
        let (col, row) = (col as usize, row as usize);
        let pixel = row * grid.width + col;
        let (w, h) = (obj.w / stride as f64, obj.h / stride as f64);
        let radius = gaussian_radius(h.ceil(), w.ceil()).max(0.0) as usize;
        draw_gaussian(&mut heatmap[obj.cls * hw..(obj.cls + 1) * hw], &grid, row, col, radius);

        let target = CenterTarget {
            class: obj.cls,
            pixel,
            size: [w, h],
            offset: [gx - col as f64, gy - row as f64],
        };
        match centers.iter_mut().find(|c| c.class == obj.cls && c.pixel == pixel) {
            Some(existing) if existing.size[0] * existing.size[1] >= w * h => {}
            Some(existing) => *existing = target,
            None => centers.push(target),
        }
        if w * h > area[pixel] {
            area[pixel] = w * h;
            size[pixel] = w;
            size[hw + pixel] = h;
            offset[pixel] = target.offset[0];
            offset[hw + pixel] = target.offset[1];
        }
    }

    let mut onehot = vec![0.0; classes * hw * 2];
    for (i, &y) in heatmap.iter().enumerate() {
        if y == 1.0 {
            onehot[2 * i + 1] = 1.0;
        } else {
            onehot[2 * i] = 1.0;
        }
    }
    let object_pixels: Vec<usize> = (0..hw).filter(|&p| area[p] > 0.0).collect();
    centers.sort_by_key(|c| (c.class, c.pixel));

    Ok(TrainingSample {
        image,
        grid,
        heatmap: Tensor::from_parts(vec![classes, grid.height, grid.width], heatmap),
        onehot: Tensor::from_parts(vec![classes, grid.height, grid.width, 2], onehot),
        size: Tensor::from_parts(vec![2, grid.height, grid.width], size),
        offset: Tensor::from_parts(vec![2, grid.height, grid.width], offset),
        centers,
        object_pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_scene, ObjectAnnotation, SceneConfig, NUM_CLASSES};

    fn scene(objects: Vec<ObjectAnnotation>) -> (Tensor, SceneAnnotation) {
        let ann = SceneAnnotation {
            id: "t".into(),
            width: 128,
            height: 128,
            objects,
            ood_objects: vec![],
        };
        (Tensor::zeros(&[1, 128, 128]), ann)
    }

    fn obj(cls: usize, cx: f64, cy: f64, w: f64, h: f64) -> ObjectAnnotation {
        ObjectAnnotation { cls, cx, cy, w, h }
    }

    #[test]
    fn single_object_peak_and_offsets() {
        let (img, ann) = scene(vec![obj(1, 17.0, 9.0, 12.0, 16.0)]);
        let s = build_targets(img, &ann, NUM_CLASSES, 4).unwrap();
        let pixel = 2 * 32 + 4;
        assert!(s.is_center(1, pixel));
        assert_eq!(s.offset.data()[pixel], 0.25);
        assert_eq!(s.offset.data()[1024 + pixel], 0.25);
        assert_eq!(s.size.data()[pixel], 3.0);
        assert_eq!(s.size.data()[1024 + pixel], 4.0);
        assert_eq!(s.onehot.data()[2 * (1024 + pixel) + 1], 1.0);
        assert_eq!(s.object_pixels, vec![pixel]);
        assert!(s.heatmap.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn colliding_same_class_objects_max_merge_and_keep_larger_box() {
        let (img, ann) = scene(vec![obj(0, 41.0, 41.0, 20.0, 12.0), obj(0, 42.5, 42.5, 30.0, 20.0)]);
        let s = build_targets(img, &ann, NUM_CLASSES, 4).unwrap();
        let pixel = 10 * 32 + 10;
        assert!(s.heatmap.data().iter().all(|&v| v <= 1.0));
        assert_eq!(s.centers.len(), 1);
        assert_eq!(s.centers[0].size, [7.5, 5.0]);
        assert_eq!(s.size.data()[pixel], 7.5);
        let centers: f64 = s.onehot.data().iter().skip(1).step_by(2).sum();
        assert_eq!(centers, 1.0);
    }

    #[test]
    fn object_channel_counts_deduplicated_centres() {
        let cfg = SceneConfig::default();
        for seed in 0..40 {
            let (img, ann) = render_scene(seed, false, &cfg);
            let s = build_targets(img, &ann, NUM_CLASSES, 4).unwrap();
            let centers: f64 = s.onehot.data().iter().skip(1).step_by(2).sum();
            assert_eq!(centers as usize, s.centers.len());
            for (y, pair) in s.heatmap.data().iter().zip(s.onehot.data().chunks(2)) {
                assert_eq!(pair[1] == 1.0, *y == 1.0);
                assert_eq!(pair[0] + pair[1], 1.0);
            }
            assert!(s.offset.data().iter().all(|&o| (0.0..1.0).contains(&o)));
        }
    }

    #[test]
    fn heatmap_symmetric_for_mirrored_scene() {
        let (img, ann) = scene(vec![obj(2, 18.0, 50.0, 16.0, 20.0), obj(2, 110.0, 50.0, 16.0, 20.0)]);
        let s = build_targets(img, &ann, NUM_CLASSES, 4).unwrap();
        let plane = &s.heatmap.data()[2 * 1024..3 * 1024];
        for row in 0..32 {
            for col in 0..32 {
                assert_eq!(plane[row * 32 + col], plane[row * 32 + (31 - col)]);
            }
        }
    }

    #[test]
    fn centre_outside_grid_is_rejected() {
        let (img, ann) = scene(vec![obj(0, 130.0, 10.0, 4.0, 4.0)]);
        assert!(matches!(build_targets(img, &ann, NUM_CLASSES, 4), Err(Error::Validation(_))));
    }

    #[test]
    fn stride_must_divide_image() {
        let (img, ann) = scene(vec![]);
        assert!(build_targets(img, &ann, NUM_CLASSES, 5).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SceneConfig::default();
        let make = || {
            let (img, ann) = render_scene(9, true, &cfg);
            build_targets(img, &ann, NUM_CLASSES, 4).unwrap()
        };
        let (a, b) = (make(), make());
        assert_eq!(a.heatmap, b.heatmap);
        assert_eq!(a.size, b.size);
        assert_eq!(a.centers, b.centers);
    }
}
