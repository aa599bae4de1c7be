//! Brute-force SSIM / MSSIM: a full 2-D Gaussian window slid over every
//! valid position, with centered (two-pass) local moments.

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
const WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn window() -> Vec<f64> {
    let c = (WINDOW / 2) as f64;
    let mut w = vec![0.0; WINDOW * WINDOW];
    for i in 0..WINDOW {
        for j in 0..WINDOW {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            w[i * WINDOW + j] = (-d2 / (2.0 * SIGMA * SIGMA)).exp();
        }
    }
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// (mean SSIM, mean contrast-structure) over all valid window positions.
pub fn ssim_cs(x: &[f64], y: &[f64], h: usize, w: usize) -> (f64, f64) {
    let win = window();
    let (mut s_sum, mut cs_sum, mut n) = (0.0, 0.0, 0usize);
    for top in 0..=h - WINDOW {
        for left in 0..=w - WINDOW {
            let at = |i: usize, j: usize| (top + i) * w + left + j;
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..WINDOW {
                for j in 0..WINDOW {
                    mx += win[i * WINDOW + j] * x[at(i, j)];
                    my += win[i * WINDOW + j] * y[at(i, j)];
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..WINDOW {
                for j in 0..WINDOW {
                    let (dx, dy) = (x[at(i, j)] - mx, y[at(i, j)] - my);
                    let g = win[i * WINDOW + j];
                    vx += g * dx * dx;
                    vy += g * dy * dy;
                    cxy += g * dx * dy;
                }
            }
            let cs = (2.0 * cxy + C2) / (vx + vy + C2);
            let l = (2.0 * mx * my + C1) / (mx * mx + my * my + C1);
            s_sum += l * cs;
            cs_sum += cs;
            n += 1;
        }
    }
    (s_sum / n as f64, cs_sum / n as f64)
}

fn halve(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((h / 2) * (w / 2));
    for i in 0..h / 2 {
        for j in 0..w / 2 {
            let s = x[2 * i * w + 2 * j]
                + x[2 * i * w + 2 * j + 1]
                + x[(2 * i + 1) * w + 2 * j]
                + x[(2 * i + 1) * w + 2 * j + 1];
            out.push(s / 4.0);
        }
    }
    out
}

pub fn ssim(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    ssim_cs(x, y, h, w).0
}

/// Multiscale SSIM of one plane; scales that no longer fit the window
/// are dropped and the remaining weights rescaled to sum to one.
pub fn mssim(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let mut dims = vec![(h, w)];
    while dims.len() < 5 {
        let (a, b) = *dims.last().unwrap();
        if a / 2 < WINDOW || b / 2 < WINDOW {
            break;
        }
        dims.push((a / 2, b / 2));
    }
    let m = dims.len();
    let wsum: f64 = WEIGHTS[..m].iter().sum();
    let (mut xs, mut ys) = (x.to_vec(), y.to_vec());
    let mut out = 1.0;
    for (s, &(a, b)) in dims.iter().enumerate() {
        let (full, cs) = ssim_cs(&xs, &ys, a, b);
        let v: f64 = if s == m - 1 { full } else { cs };
        out *= v.max(0.0).powf(WEIGHTS[s] / wsum);
        if s + 1 < m {
            xs = halve(&xs, a, b);
            ys = halve(&ys, a, b);
        }
    }
    out
}

/// Mean over channels of planar `c × h × w` data.
pub fn mssim_image(x: &[f32], y: &[f32], c: usize, h: usize, w: usize) -> f64 {
    (0..c)
        .map(|k| {
            let a: Vec<f64> = x[k * h * w..(k + 1) * h * w]
                .iter()
                .map(|&v| v as f64)
                .collect();
            let b: Vec<f64> = y[k * h * w..(k + 1) * h * w]
                .iter()
                .map(|&v| v as f64)
                .collect();
            mssim(&a, &b, h, w)
        })
        .sum::<f64>()
        / c as f64
}
