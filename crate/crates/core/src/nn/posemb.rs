use crate::tensor::{Scalar, Tensor};

/// Fixed 2-D sine–cosine positional embedding, one row per grid slot in
/// row-major order. The first half of the channels encodes the row, the
/// second half the column; each half is `[sin(p·ω_i), cos(p·ω_i)]` with
/// `ω_i = 10000^(−i/(D/4))`. `embed_dim` must be divisible by 4.
pub fn sincos_2d<T: Scalar>(grid: (usize, usize), embed_dim: usize) -> Tensor<T> {
    assert!(embed_dim % 4 == 0, "embed_dim must be divisible by 4");
    let quarter = embed_dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let (rows, cols) = grid;
    let mut out = Tensor::zeros(&[rows * cols, embed_dim]);
    for r in 0..rows {
        for c in 0..cols {
            let v = out.row_mut(r * cols + c);
            for (i, &w) in omega.iter().enumerate() {
                v[i] = T::c((r as f64 * w).sin());
                v[quarter + i] = T::c((r as f64 * w).cos());
                v[2 * quarter + i] = T::c((c as f64 * w).sin());
                v[3 * quarter + i] = T::c((c as f64 * w).cos());
            }
        }
    }
    out
}
