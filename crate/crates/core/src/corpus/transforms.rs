//! Image-to-condition transforms. Each is a pure function of the input image,
//! so conditions can be recomputed from generated samples.

use super::{Color, ConditionImage, Image, TransformKind};

/// Edge threshold on the Sobel response, in units of pixel step height.
pub const EDGE_THRESHOLD: f32 = 0.5;
pub const HED_SIGMA: f32 = 1.0;
/// Gain applied to depth gradients before normalizing into a normal vector.
pub const NORMAL_GAIN: f32 = 4.0;

/// Label color per scene color for the segmentation map. The background label
/// is black and no shape label is black.
const SEG_LABELS: [[f32; 3]; 8] = [
    [0.5, -0.5, 1.0],
    [1.0, 0.5, -0.5],
    [-0.5, 1.0, 0.5],
    [0.0, 0.0, 1.0],
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.5, 0.5, 0.5],
    [-0.5, -0.5, 0.0],
];
const SEG_BACKGROUND: [f32; 3] = [-1.0, -1.0, -1.0];

pub fn apply_transform(image: &Image, kind: TransformKind) -> ConditionImage {
    match kind {
        TransformKind::HedProxy => hed(image),
        TransformKind::DepthProxy => Image::from_gray(image.size(), &depth_map(image)),
        TransformKind::SegProxy => segmentation(image),
        TransformKind::CannyProxy => canny(image),
        TransformKind::NormalProxy => normals(image),
        TransformKind::ScribbleProxy => scribble(image),
    }
}

fn clamp_idx(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

/// Per-pixel Sobel magnitude, maximum over channels, scaled so that a step of
/// height `h` responds with `h`.
pub fn sobel_magnitude(image: &Image) -> Vec<f32> {
    let n = image.size();
    let mut mag = vec![0.0f32; n * n];
    for c in 0..3 {
        let ch = image.channel(c);
        let at = |x: isize, y: isize| ch[clamp_idx(y, n) * n + clamp_idx(x, n)];
        for y in 0..n as isize {
            for x in 0..n as isize {
                let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                    - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
                let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                    - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
                let m = (gx * gx + gy * gy).sqrt() / 4.0;
                let slot = &mut mag[y as usize * n + x as usize];
                *slot = slot.max(m);
            }
        }
    }
    mag
}

fn edge_mask(image: &Image) -> Vec<f32> {
    sobel_magnitude(image)
        .into_iter()
        .map(|m| if m >= EDGE_THRESHOLD { 1.0 } else { 0.0 })
        .collect()
}

fn to_signed(unit: &[f32]) -> Vec<f32> {
    unit.iter().map(|v| (2.0 * v - 1.0).clamp(-1.0, 1.0)).collect()
}

fn gaussian_blur(map: &[f32], n: usize, sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let mut tmp = vec![0.0f32; n * n];
    for y in 0..n {
        for x in 0..n {
            tmp[y * n + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * map[y * n + clamp_idx(x as isize + k as isize - radius, n)])
                .sum();
        }
    }
    let mut out = vec![0.0f32; n * n];
    for y in 0..n {
        for x in 0..n {
            out[y * n + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clamp_idx(y as isize + k as isize - radius, n) * n + x])
                .sum();
        }
    }
    out
}

/// Blurred binary edge map.
fn hed(image: &Image) -> ConditionImage {
    let n = image.size();
    let blurred = gaussian_blur(&edge_mask(image), n, HED_SIGMA);
    Image::from_gray(n, &to_signed(&blurred))
}

/// Unblurred binary edge map.
fn canny(image: &Image) -> ConditionImage {
    Image::from_gray(image.size(), &to_signed(&edge_mask(image)))
}

/// Nearest palette color per pixel.
fn color_classes(image: &Image) -> Vec<Color> {
    let n = image.size();
    (0..n * n).map(|i| Color::nearest(image.pixel(i % n, i / n))).collect()
}

/// Most frequent class along the canvas border (first palette entry on ties).
fn background_class(classes: &[Color], n: usize) -> Color {
    let mut counts = [0usize; 8];
    for i in 0..n {
        for &(x, y) in &[(i, 0), (i, n - 1), (0, i), (n - 1, i)] {
            counts[classes[y * n + x].index()] += 1;
        }
    }
    let best = (0..8).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).unwrap();
    Color::ALL[best]
}

/// Region id per pixel: 0 for background, otherwise 4-connected components of
/// equal non-background color, numbered from 1 in scan order.
pub fn regions(image: &Image) -> (Vec<usize>, usize) {
    let n = image.size();
    let classes = color_classes(image);
    let bg = background_class(&classes, n);
    let mut label = vec![usize::MAX; n * n];
    let mut next = 1;
    for start in 0..n * n {
        if label[start] != usize::MAX {
            continue;
        }
        if classes[start] == bg {
            label[start] = 0;
            continue;
        }
        let class = classes[start];
        let mut stack = vec![start];
        label[start] = next;
        while let Some(p) = stack.pop() {
            let (x, y) = (p % n, p / n);
            let mut push = |q: usize| {
                if label[q] == usize::MAX && classes[q] == class {
                    label[q] = next;
                    stack.push(q);
                }
            };
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < n {
                push(p + 1);
            }
            if y > 0 {
                push(p - n);
            }
            if y + 1 < n {
                push(p + n);
            }
        }
        next += 1;
    }
    (label, next - 1)
}

/// Flat label rendering: one label color per scene color, black background.
fn segmentation(image: &Image) -> ConditionImage {
    let n = image.size();
    let classes = color_classes(image);
    let bg = background_class(&classes, n);
    let mut out = Image::filled(n, SEG_BACKGROUND);
    for (i, &c) in classes.iter().enumerate() {
        if c != bg {
            out.set_pixel(i % n, i / n, SEG_LABELS[c.index()]);
        }
    }
    out
}

/// Per-region Euclidean interior distance normalized to `(0, 1]` and mapped to
/// `(-1, 1]`; background is -1.
pub fn depth_map(image: &Image) -> Vec<f32> {
    let n = image.size();
    let (label, count) = regions(image);
    let mut dist = vec![0.0f32; n * n];
    let mut out = vec![-1.0f32; n * n];
    for region in 1..=count {
        // nearest non-member pixel is always 4-adjacent to a member
        let mut border: Vec<(f32, f32)> = Vec::new();
        let mut members = Vec::new();
        for p in 0..n * n {
            if label[p] != region {
                continue;
            }
            members.push(p);
            let (x, y) = ((p % n) as isize, (p / n) as isize);
            for (dx, dy) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                let (qx, qy) = (x + dx, y + dy);
                let outside = qx < 0
                    || qy < 0
                    || qx >= n as isize
                    || qy >= n as isize
                    || label[qy as usize * n + qx as usize] != region;
                if outside {
                    border.push((qx as f32, qy as f32));
                }
            }
        }
        let mut max_d = 0.0f32;
        for &p in &members {
            let (x, y) = ((p % n) as f32, (p / n) as f32);
            let d = border
                .iter()
                .map(|&(bx, by)| (bx - x) * (bx - x) + (by - y) * (by - y))
                .fold(f32::INFINITY, f32::min)
                .sqrt();
            dist[p] = d;
            max_d = max_d.max(d);
        }
        for &p in &members {
            out[p] = -1.0 + 2.0 * dist[p] / max_d;
        }
    }
    out
}

/// Surface normals of the depth map packed as `(nx, ny, 2 nz - 1)`.
fn normals(image: &Image) -> ConditionImage {
    let n = image.size();
    let depth = depth_map(image);
    let at = |x: isize, y: isize| depth[clamp_idx(y, n) * n + clamp_idx(x, n)];
    let mut out = Image::filled(n, [0.0, 0.0, 1.0]);
    for y in 0..n as isize {
        for x in 0..n as isize {
            let gx = (at(x + 1, y) - at(x - 1, y)) / 2.0 * NORMAL_GAIN;
            let gy = (at(x, y + 1) - at(x, y - 1)) / 2.0 * NORMAL_GAIN;
            let len = (gx * gx + gy * gy + 1.0).sqrt();
            let (nx, ny, nz) = (-gx / len, -gy / len, 1.0 / len);
            out.set_pixel(x as usize, y as usize, [nx, ny, (2.0 * nz - 1.0).clamp(-1.0, 1.0)]);
        }
    }
    out
}

/// One-pixel skeleton of segmentation boundaries.
fn scribble(image: &Image) -> ConditionImage {
    let n = image.size();
    let seg = segmentation(image);
    let mut mask = vec![false; n * n];
    for y in 0..n {
        for x in 0..n {
            let here = seg.pixel(x, y);
            let differs = [(1isize, 0isize), (-1, 0), (0, 1), (0, -1)].iter().any(|&(dx, dy)| {
                let (qx, qy) = (x as isize + dx, y as isize + dy);
                qx >= 0 && qy >= 0 && qx < n as isize && qy < n as isize && seg.pixel(qx as usize, qy as usize) != here
            });
            mask[y * n + x] = differs;
        }
    }
    let thin = zhang_suen_thin(mask, n);
    let gray: Vec<f32> = thin.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
    Image::from_gray(n, &gray)
}

/// Zhang-Suen morphological thinning of a binary mask.
pub fn zhang_suen_thin(mut mask: Vec<bool>, n: usize) -> Vec<bool> {
    let get = |m: &[bool], x: isize, y: isize| -> bool {
        x >= 0 && y >= 0 && x < n as isize && y < n as isize && m[y as usize * n + x as usize]
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..n as isize {
                for x in 0..n as isize {
                    if !get(&mask, x, y) {
                        continue;
                    }
                    // P2..P9 clockwise from north
                    let nb = [
                        get(&mask, x, y - 1),
                        get(&mask, x + 1, y - 1),
                        get(&mask, x + 1, y),
                        get(&mask, x + 1, y + 1),
                        get(&mask, x, y + 1),
                        get(&mask, x - 1, y + 1),
                        get(&mask, x - 1, y),
                        get(&mask, x - 1, y - 1),
                    ];
                    let b = nb.iter().filter(|&&v| v).count();
                    let a = (0..8).filter(|&i| !nb[i] && nb[(i + 1) % 8]).count();
                    let (p2, p4, p6, p8) = (nb[0], nb[2], nb[4], nb[6]);
                    let cond = if pass == 0 {
                        !(p2 && p4 && p6) && !(p4 && p6 && p8)
                    } else {
                        !(p2 && p4 && p8) && !(p2 && p6 && p8)
                    };
                    if (2..=6).contains(&b) && a == 1 && cond {
                        remove.push(y as usize * n + x as usize);
                    }
                }
            }
            changed |= !remove.is_empty();
            for p in remove {
                mask[p] = false;
            }
        }
        if !changed {
            return mask;
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::corpus::{render_scene, SceneSpec, Shape, ShapeKind};

    fn scene(shapes: Vec<Shape>) -> SceneSpec {
        SceneSpec {
            shapes,
            background: Color::White,
            resolution: 32,
            seed: 0,
        }
    }

    fn shape(kind: ShapeKind, color: Color, center: (i32, i32), size: u32, z: i32) -> Shape {
        Shape {
            kind,
            color,
            center,
            size,
            z,
        }
    }

    fn distinct_pixels(img: &Image) -> usize {
        let n = img.size();
        let mut set = BTreeSet::new();
        for y in 0..n {
            for x in 0..n {
                set.insert(img.pixel(x, y).map(f32::to_bits));
            }
        }
        set.len()
    }

    #[test]
    fn uniform_image_has_no_edges() {
        let img = Image::filled(32, Color::Green.rgb());
        for kind in [TransformKind::HedProxy, TransformKind::CannyProxy] {
            let c = apply_transform(&img, kind);
            assert!(c.data().iter().all(|&v| v == -1.0), "{kind:?}");
        }
    }

    #[test]
    fn circle_depth_peaks_at_center_and_is_background_outside() {
        let img = render_scene(&scene(vec![shape(ShapeKind::Circle, Color::Red, (16, 16), 16, 0)])).unwrap();
        let depth = apply_transform(&img, TransformKind::DepthProxy);
        let max = depth.data().iter().copied().fold(f32::MIN, f32::max);
        assert_eq!(depth.pixel(16, 16)[0], max);
        assert_eq!(max, 1.0);
        assert_eq!(depth.pixel(0, 0), [-1.0; 3]);
        assert_eq!(depth.pixel(16, 3), [-1.0; 3]);
    }

    #[test]
    fn two_shape_segmentation_has_three_values_by_pixel_scan() {
        let img = render_scene(&scene(vec![
            shape(ShapeKind::Circle, Color::Red, (10, 10), 10, 0),
            shape(ShapeKind::Square, Color::Blue, (22, 22), 8, 1),
        ]))
        .unwrap();
        let seg = apply_transform(&img, TransformKind::SegProxy);
        assert_eq!(distinct_pixels(&seg), 3);
    }

    #[test]
    fn segmentation_counts_visible_shapes_plus_background() {
        for seed in 0..200 {
            let spec = SceneSpec::random(seed, 32);
            let img = render_scene(&spec).unwrap();
            let visible = spec
                .shapes
                .iter()
                .filter(|s| {
                    let n = img.size();
                    (0..n * n).any(|i| img.pixel(i % n, i / n) == s.color.rgb())
                })
                .count();
            let seg = apply_transform(&img, TransformKind::SegProxy);
            assert_eq!(distinct_pixels(&seg), visible + 1, "seed {seed}");
        }
    }

    #[test]
    fn all_transforms_stay_in_range_and_are_deterministic() {
        for seed in 0..40 {
            let img = render_scene(&SceneSpec::random(seed, 32)).unwrap();
            for kind in TransformKind::ALL {
                let a = apply_transform(&img, kind);
                assert!(a.in_range(), "{kind:?} seed {seed}");
                assert_eq!(a, apply_transform(&img, kind));
            }
        }
    }

    #[test]
    fn scribble_is_thin() {
        let img = render_scene(&scene(vec![shape(ShapeKind::Square, Color::Black, (16, 16), 12, 0)])).unwrap();
        let s = apply_transform(&img, TransformKind::ScribbleProxy);
        let n = 32;
        let on = |x: usize, y: usize| s.pixel(x, y)[0] > 0.0;
        let count = (0..n * n).filter(|&i| on(i % n, i / n)).count();
        assert!(count > 0);
        // no fully-set 2x2 blocks remain after thinning
        for y in 0..n - 1 {
            for x in 0..n - 1 {
                assert!(!(on(x, y) && on(x + 1, y) && on(x, y + 1) && on(x + 1, y + 1)));
            }
        }
    }

    #[test]
    fn flat_background_normals_point_up() {
        let img = render_scene(&scene(vec![shape(ShapeKind::Circle, Color::Red, (16, 16), 8, 0)])).unwrap();
        let nm = apply_transform(&img, TransformKind::NormalProxy);
        assert_eq!(nm.pixel(1, 1), [0.0, 0.0, 1.0]);
        assert_ne!(nm.pixel(14, 16), [0.0, 0.0, 1.0]);
    }
}
