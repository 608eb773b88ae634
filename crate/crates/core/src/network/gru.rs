//! Batched GRU cell with cached activations for the backward pass.

use ndarray::{Array2, Axis};

/// Gate weights stored `(out, in)`; biases are `(1, d)` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights {
    pub wz: Array2<f64>,
    pub uz: Array2<f64>,
    pub bz: Array2<f64>,
    pub wr: Array2<f64>,
    pub ur: Array2<f64>,
    pub br: Array2<f64>,
    pub wn: Array2<f64>,
    pub un: Array2<f64>,
    pub bn: Array2<f64>,
}

pub(crate) const GRU_FIELDS: [&str; 9] = ["wz", "uz", "bz", "wr", "ur", "br", "wn", "un", "bn"];

impl GruWeights {
    pub fn zeros(d: usize) -> Self {
        let m = || Array2::zeros((d, d));
        let b = || Array2::zeros((1, d));
        Self {
            wz: m(),
            uz: m(),
            bz: b(),
            wr: m(),
            ur: m(),
            br: b(),
            wn: m(),
            un: m(),
            bn: b(),
        }
    }

    pub(crate) fn fields(&self) -> [&Array2<f64>; 9] {
        [
            &self.wz, &self.uz, &self.bz, &self.wr, &self.ur, &self.br, &self.wn, &self.un,
            &self.bn,
        ]
    }

    pub(crate) fn fields_mut(&mut self) -> [&mut Array2<f64>; 9] {
        [
            &mut self.wz,
            &mut self.uz,
            &mut self.bz,
            &mut self.wr,
            &mut self.ur,
            &mut self.br,
            &mut self.wn,
            &mut self.un,
            &mut self.bn,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruCache {
    pub x: Array2<f64>,
    pub h: Array2<f64>,
    pub z: Array2<f64>,
    pub r: Array2<f64>,
    pub n: Array2<f64>,
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn affine(
    x: &Array2<f64>,
    w: &Array2<f64>,
    h: &Array2<f64>,
    u: &Array2<f64>,
    b: &Array2<f64>,
) -> Array2<f64> {
    x.dot(&w.t()) + h.dot(&u.t()) + b
}

/// `h' = (1 - z) * n + z * h` with `n = tanh(W_n x + U_n (r * h) + b_n)`.
pub fn gru_forward(g: &GruWeights, h: &Array2<f64>, x: &Array2<f64>) -> (Array2<f64>, GruCache) {
    let z = affine(x, &g.wz, h, &g.uz, &g.bz).mapv(sigmoid);
    let r = affine(x, &g.wr, h, &g.ur, &g.br).mapv(sigmoid);
    let rh = &r * h;
    let n = affine(x, &g.wn, &rh, &g.un, &g.bn).mapv(f64::tanh);
    let out = (1.0 - &z) * &n + &z * h;
    let cache = GruCache {
        x: x.clone(),
        h: h.clone(),
        z,
        r,
        n,
    };
    (out, cache)
}

fn accumulate(
    grad: &mut GruWeights,
    pre: &Array2<f64>,
    x: &Array2<f64>,
    h: &Array2<f64>,
    gate: usize,
) {
    let [w, u, b] = match gate {
        0 => [&mut grad.wz, &mut grad.uz, &mut grad.bz],
        1 => [&mut grad.wr, &mut grad.ur, &mut grad.br],
        _ => [&mut grad.wn, &mut grad.un, &mut grad.bn],
    };
    *w += &pre.t().dot(x);
    *u += &pre.t().dot(h);
    *b += &pre.sum_axis(Axis(0)).insert_axis(Axis(0));
}

/// Accumulates weight gradients into `grad`; returns `(dh, dx)`.
pub fn gru_backward(
    g: &GruWeights,
    cache: &GruCache,
    dout: &Array2<f64>,
    grad: &mut GruWeights,
) -> (Array2<f64>, Array2<f64>) {
    let GruCache { x, h, z, r, n } = cache;
    let dn = dout * &(1.0 - z);
    let dz = dout * &(h - n);
    let mut dh = dout * z;

    let dan = dn * &n.mapv(|v| 1.0 - v * v);
    let rh = r * h;
    accumulate(grad, &dan, x, &rh, 2);
    let mut dx = dan.dot(&g.wn);
    let drh = dan.dot(&g.un);
    let dr = &drh * h;
    dh += &(&drh * r);

    let dar = dr * &r.mapv(|v| v * (1.0 - v));
    accumulate(grad, &dar, x, h, 1);
    dx += &dar.dot(&g.wr);
    dh += &dar.dot(&g.ur);

    let daz = dz * &z.mapv(|v| v * (1.0 - v));
    accumulate(grad, &daz, x, h, 0);
    dx += &daz.dot(&g.wz);
    dh += &daz.dot(&g.uz);
    (dh, dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_halve_hidden() {
        // z = r = 0.5, n = 0 => h' = h / 2
        let g = GruWeights::zeros(2);
        let h = Array2::from_shape_vec((1, 2), vec![1.0, -4.0]).unwrap();
        let (out, _) = gru_forward(&g, &h, &Array2::zeros((1, 2)));
        assert_eq!(out.row(0).to_vec(), vec![0.5, -2.0]);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }
}
