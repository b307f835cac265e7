//! Straight-line reference implementations written without the library's
//! tensor code, used as independent oracles.

#![allow(dead_code)]

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// One LSTM step on plain vectors. `w[g]` is `H×(H+I)` row-major over the
/// concatenation `[h; x]`, gates in forget, input, candidate, output order.
pub fn lstm_step(w: &[Vec<f64>; 4], b: &[Vec<f64>; 4], x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hidden = h.len();
    let cols = hidden + x.len();
    let hx: Vec<f64> = h.iter().chain(x).copied().collect();
    let pre = |g: usize, j: usize| -> f64 {
        let mut z = 0.0;
        for k in 0..cols {
            z += w[g][j * cols + k] * hx[k];
        }
        z + b[g][j]
    };
    let mut h_new = vec![0.0; hidden];
    let mut c_new = vec![0.0; hidden];
    for j in 0..hidden {
        let f = sigmoid(pre(0, j));
        let i = sigmoid(pre(1, j));
        let g = pre(2, j).tanh();
        let o = sigmoid(pre(3, j));
        c_new[j] = f * c[j] + i * g;
        h_new[j] = o * c_new[j].tanh();
    }
    (h_new, c_new)
}

/// `−ln p_y`.
pub fn cross_entropy(p: &[f64], y: usize) -> f64 {
    -p[y].ln()
}

/// `−α (1 − p_y)^γ ln p_y`.
pub fn focal(p: &[f64], y: usize, alpha: f64, gamma: f64) -> f64 {
    -alpha * (1.0 - p[y]).powf(gamma) * p[y].ln()
}

pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    2.0 / (1.0 / a + 1.0 / b)
}

/// L2-regularized logistic regression fitted by full-batch gradient
/// descent on features standardized with training statistics.
pub struct Logistic {
    mean: Vec<f64>,
    std: Vec<f64>,
    w: Vec<f64>,
    b: f64,
}

impl Logistic {
    pub fn fit(x: &[Vec<f64>], y: &[u8], epochs: usize, lr: f64, l2: f64) -> Self {
        let d = x[0].len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        for row in x {
            for ((s, v), m) in std.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let std: Vec<f64> = std.into_iter().map(|s| s.sqrt().max(1e-12)).collect();
        let mut model = Self {
            mean,
            std,
            w: vec![0.0; d],
            b: 0.0,
        };
        let z: Vec<Vec<f64>> = x.iter().map(|r| model.standardize(r)).collect();
        for _ in 0..epochs {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (row, &label) in z.iter().zip(y) {
                let err = sigmoid(model.score(row)) - f64::from(label);
                for (g, v) in gw.iter_mut().zip(row) {
                    *g += err * v / n;
                }
                gb += err / n;
            }
            for (w, g) in model.w.iter_mut().zip(&gw) {
                *w -= lr * (g + l2 * *w);
            }
            model.b -= lr * gb;
        }
        model
    }

    fn standardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn score(&self, z: &[f64]) -> f64 {
        z.iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>() + self.b
    }

    pub fn predict(&self, row: &[f64]) -> u8 {
        u8::from(self.score(&self.standardize(row)) >= 0.0)
    }
}
