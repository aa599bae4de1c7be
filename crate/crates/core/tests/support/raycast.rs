//! Ray casting against planes and boxes, the box test done face by face.

pub type V3 = [f64; 3];

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Distance along `dir` to the plane `{p : n·p = c}`, if ahead.
pub fn ray_plane(origin: V3, dir: V3, n: V3, c: f64) -> Option<f64> {
    let denom = dot(n, dir);
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = (c - dot(n, origin)) / denom;
    (t > 0.0).then_some(t)
}

/// Entry distance into an axis-aligned box: the nearest hit among its six
/// faces whose hit point lies inside the face rectangle.
pub fn ray_box(origin: V3, dir: V3, min: V3, max: V3) -> Option<f64> {
    let mut best: Option<f64> = None;
    for axis in 0..3 {
        for &c in &[min[axis], max[axis]] {
            let mut n = [0.0; 3];
            n[axis] = 1.0;
            let Some(t) = ray_plane(origin, dir, n, c) else {
                continue;
            };
            let p = [
                origin[0] + t * dir[0],
                origin[1] + t * dir[1],
                origin[2] + t * dir[2],
            ];
            let inside = (0..3)
                .filter(|&a| a != axis)
                .all(|a| p[a] >= min[a] - 1e-9 && p[a] <= max[a] + 1e-9);
            if inside && best.is_none_or(|b| t < b) {
                best = Some(t);
            }
        }
    }
    best
}

pub fn direction(azimuth: f64, elevation: f64) -> V3 {
    [
        elevation.cos() * azimuth.cos(),
        elevation.cos() * azimuth.sin(),
        elevation.sin(),
    ]
}
