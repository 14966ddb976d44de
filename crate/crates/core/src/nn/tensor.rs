/// Activation tensor stored channel-major (`[channels, batch, height, width]`).
///
/// Keeping the channel axis outermost lets convolutions write their GEMM output
/// in place and gives batch-norm contiguous per-channel slices.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            batch,
            height,
            width,
            data: vec![0.0; channels * batch * height * width],
        }
    }

    pub fn from_vec(
        channels: usize,
        batch: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Self {
        assert_eq!(data.len(), channels * batch * height * width);
        Self {
            channels,
            batch,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Elements belonging to one channel across the whole batch.
    #[inline]
    pub fn channel_len(&self) -> usize {
        self.batch * self.plane()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels
            && self.batch == other.batch
            && self.height == other.height
            && self.width == other.width
    }

    /// Copies the examples `rows` (in order) into a new map.
    pub fn gather(&self, rows: &[std::ops::Range<usize>]) -> Self {
        let batch: usize = rows.iter().map(|r| r.len()).sum();
        let plane = self.plane();
        let mut data = Vec::with_capacity(self.channels * batch * plane);
        for c in 0..self.channels {
            let base = c * self.channel_len();
            for r in rows {
                data.extend_from_slice(&self.data[base + r.start * plane..base + r.end * plane]);
            }
        }
        Self::from_vec(self.channels, batch, self.height, self.width, data)
    }

    /// Adds `src` into the example rows `rows` of `self`; inverse of [`gather`](Self::gather).
    pub fn scatter_add(&mut self, rows: &[std::ops::Range<usize>], src: &Self) {
        let plane = self.plane();
        let own_len = self.channel_len();
        let src_len = src.channel_len();
        for c in 0..self.channels {
            let mut offset = c * src_len;
            for r in rows {
                let dst = &mut self.data[c * own_len + r.start * plane..c * own_len + r.end * plane];
                for (d, s) in dst.iter_mut().zip(&src.data[offset..offset + r.len() * plane]) {
                    *d += *s;
                }
                offset += r.len() * plane;
            }
        }
    }

    /// Returns the `[batch, channels]` row-major matrix of a map with 1x1 planes.
    pub fn to_rows(&self) -> Vec<f64> {
        assert_eq!(self.plane(), 1, "to_rows requires pooled features");
        let mut out = vec![0.0; self.batch * self.channels];
        for c in 0..self.channels {
            for n in 0..self.batch {
                out[n * self.channels + c] = self.data[c * self.batch + n];
            }
        }
        out
    }

    /// Inverse of [`to_rows`](Self::to_rows).
    pub fn from_rows(rows: &[f64], batch: usize, channels: usize) -> Self {
        assert_eq!(rows.len(), batch * channels);
        let mut data = vec![0.0; rows.len()];
        for n in 0..batch {
            for c in 0..channels {
                data[c * batch + n] = rows[n * channels + c];
            }
        }
        Self::from_vec(channels, batch, 1, 1, data)
    }
}

/// `c = a·b + beta·c` for row-major matrices, with optional transposition of
/// either operand. `a` is `m×k` after transposition, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index reachable through the strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], at: bool, b: &[f64], bt: bool) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    let av = if at { a[p * m + i] } else { a[i * k + p] };
                    let bv = if bt { b[j * k + p] } else { b[p * n + j] };
                    s += av * bv;
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_for_all_transpositions() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        for at in [false, true] {
            for bt in [false, true] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, &a, at, &b, bt, 0.0, &mut c);
                let expected = naive(m, k, n, &a, at, &b, bt);
                for (x, y) in c.iter().zip(&expected) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gather_scatter_round_trip() {
        let fm = FeatureMap::from_vec(2, 4, 1, 2, (0..16).map(f64::from).collect());
        let rows = [0..1, 2..4];
        let g = fm.gather(&rows);
        assert_eq!(g.batch, 3);
        assert_eq!(g.data, vec![0., 1., 4., 5., 6., 7., 8., 9., 12., 13., 14., 15.]);
        let mut back = FeatureMap::zeros(2, 4, 1, 2);
        back.scatter_add(&rows, &g);
        assert_eq!(back.data[2..4], [0.0, 0.0]);
        assert_eq!(back.data[4..8], fm.data[4..8]);
    }

    #[test]
    fn rows_round_trip() {
        let rows = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let fm = FeatureMap::from_rows(&rows, 2, 3);
        assert_eq!(fm.to_rows(), rows);
    }
}
