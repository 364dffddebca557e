//! Procedural shape scenes and their analytically derived condition maps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::raster::{self, Px};
use super::{ConditionSample, Image, IMAGE_SIZE};

pub const NUM_CLASSES: usize = 8;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "small_circle",
    "large_circle",
    "square",
    "wide_rect",
    "tall_rect",
    "triangle_up",
    "triangle_down",
    "right_triangle",
];

/// Depth written for the nearest shape; each step back subtracts [`DEPTH_STEP`].
pub const DEPTH_NEAR: u8 = 255;
pub const DEPTH_STEP: u8 = 85;
/// HSV value of the fill, indexed by depth rank (0 = nearest).
pub const RANK_BRIGHTNESS: [f64; 3] = [1.0, 200.0 / 255.0, 145.0 / 255.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Geometry {
    Circle { cx: i32, cy: i32, r: i32 },
    Rect { x0: i32, y0: i32, x1: i32, y1: i32 },
    Triangle { vertices: [Px; 3] },
}

impl Geometry {
    pub fn outline(&self) -> Vec<Px> {
        match *self {
            Geometry::Circle { cx, cy, r } => raster::circle_outline(cx, cy, r),
            Geometry::Rect { x0, y0, x1, y1 } => raster::rect_outline(x0, y0, x1, y1),
            Geometry::Triangle { vertices } => raster::polygon_outline(&vertices),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub geometry: Geometry,
    pub hue: f64,
    pub saturation: f64,
    /// Face normal for polygons; circles use sphere shading instead.
    pub tilt: (f64, f64),
}

/// Shapes listed back to front.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub class: usize,
    pub shapes: Vec<Shape>,
}

fn sample_geometry(class: usize, rng: &mut ChaCha8Rng) -> Geometry {
    let s = IMAGE_SIZE as i32;
    let place = |rng: &mut ChaCha8Rng, w: i32, h: i32| -> (i32, i32) {
        (rng.random_range(0..=s - 1 - w), rng.random_range(0..=s - 1 - h))
    };
    match class {
        0 | 1 => {
            let r = if class == 0 {
                rng.random_range(3..=5)
            } else {
                rng.random_range(7..=10)
            };
            let (x, y) = place(rng, 2 * r, 2 * r);
            Geometry::Circle {
                cx: x + r,
                cy: y + r,
                r,
            }
        }
        2..=4 => {
            let (w, h) = match class {
                2 => {
                    let a = rng.random_range(6..=12);
                    (a, a)
                }
                3 => (rng.random_range(11..=18), rng.random_range(4..=7)),
                _ => (rng.random_range(4..=7), rng.random_range(11..=18)),
            };
            let (x0, y0) = place(rng, w - 1, h - 1);
            Geometry::Rect {
                x0,
                y0,
                x1: x0 + w - 1,
                y1: y0 + h - 1,
            }
        }
        5 | 6 => {
            // steeper legs leave a one-pixel spur at the apex
            let half = rng.random_range(5..=8);
            let h = rng.random_range(6..=2 * half);
            let (x0, y0) = place(rng, 2 * half, h);
            let (apex_y, base_y) = if class == 5 { (y0, y0 + h) } else { (y0 + h, y0) };
            Geometry::Triangle {
                vertices: [(x0, base_y), (x0 + 2 * half, base_y), (x0 + half, apex_y)],
            }
        }
        _ => {
            let a = rng.random_range(8..=13);
            let b = rng.random_range(8..=13);
            let (x0, y0) = place(rng, a, b);
            Geometry::Triangle {
                vertices: [(x0, y0), (x0, y0 + b), (x0 + a, y0 + b)],
            }
        }
    }
}

impl Scene {
    pub fn empty() -> Self {
        Scene {
            class: 0,
            shapes: Vec::new(),
        }
    }

    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let class = rng.random_range(0..NUM_CLASSES);
        let count = rng.random_range(1..=3);
        let shapes = (0..count)
            .map(|_| Shape {
                geometry: sample_geometry(class, &mut rng),
                hue: rng.random_range(0.0..360.0),
                saturation: rng.random_range(0.5..1.0),
                tilt: (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
            })
            .collect();
        Scene { class, shapes }
    }

    /// Renders the image and every condition map from the scene parameters.
    pub fn render(&self) -> ConditionSample {
        let n = IMAGE_SIZE;
        let mut rgb = vec![0u8; n * n * 3];
        let mut depth = vec![0u8; n * n];
        let mut normal = vec![[0.0, 0.0, 1.0]; n * n];
        let mut edge = vec![false; n * n];
        let count = self.shapes.len();
        for (i, shape) in self.shapes.iter().enumerate() {
            let rank = count - 1 - i;
            let outline = shape.geometry.outline();
            let fill = raster::fill_convex(&outline, n);
            let color = hsv_to_rgb(shape.hue, shape.saturation, RANK_BRIGHTNESS[rank.min(2)]);
            let dv = DEPTH_NEAR - DEPTH_STEP * rank.min(2) as u8;
            for p in (0..n * n).filter(|&p| fill[p]) {
                rgb[3 * p..3 * p + 3].copy_from_slice(&color);
                depth[p] = dv;
                edge[p] = false;
                normal[p] = match shape.geometry {
                    Geometry::Circle { cx, cy, r } => {
                        let rr = r as f64 + 0.5;
                        let dx = ((p % n) as f64 - cx as f64) / rr;
                        let dy = ((p / n) as f64 - cy as f64) / rr;
                        let nz = (1.0 - dx * dx - dy * dy).max(0.0).sqrt();
                        unit([dx, -dy, nz])
                    }
                    _ => unit([shape.tilt.0, shape.tilt.1, 1.0]),
                };
            }
            raster::plot(&mut edge, n, &outline);
        }
        let edge_f: Vec<f64> = edge.iter().map(|&e| if e { 255.0 } else { 0.0 }).collect();
        let hed = raster::gaussian_blur(&edge_f, n, 1.0);
        let sketch = raster::dilate(&edge, n, 1);
        ConditionSample {
            class: self.class,
            image: Image::new(n, n, 3, rgb).expect("sized"),
            edge: Image::from_mask(n, &edge),
            depth: Image::new(n, n, 1, depth).expect("sized"),
            normal: Image::new(n, n, 3, normal.iter().flat_map(|v| quantize_normal(*v)).collect())
                .expect("sized"),
            hed: Image::new(n, n, 1, hed.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect())
                .expect("sized"),
            sketch: Image::from_mask(n, &sketch),
        }
    }
}

pub fn unit(v: [f64; 3]) -> [f64; 3] {
    let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / norm, v[1] / norm, v[2] / norm]
}

pub fn quantize_normal(v: [f64; 3]) -> [u8; 3] {
    v.map(|c| ((c + 1.0) * 0.5 * 255.0).round().clamp(0.0, 255.0) as u8)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = (h / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round() as u8)
}

/// Sample for `seed`; identical seeds give byte-identical samples.
pub fn gen_scene(seed: u64) -> ConditionSample {
    Scene::sample(seed).render()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_is_blank() {
        let s = Scene::empty().render();
        assert!(s.image.data.iter().all(|&v| v == 0));
        assert!(s.edge.data.iter().all(|&v| v == 0));
        assert!(s.depth.data.iter().all(|&v| v == 0));
        assert!(s.normal.data.chunks(3).all(|p| p == [128, 128, 255]));
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [255, 0, 0]);
        assert_eq!(hsv_to_rgb(120.0, 1.0, 1.0), [0, 255, 0]);
        assert_eq!(hsv_to_rgb(240.0, 1.0, 0.5), [0, 0, 128]);
    }

    #[test]
    fn nearest_shape_is_brightest_depth() {
        for seed in 0..20 {
            let scene = Scene::sample(seed);
            let s = scene.render();
            assert!(s.depth.data.contains(&DEPTH_NEAR));
            assert!((1..=3).contains(&scene.shapes.len()));
        }
    }
}
