//! Single-sample forward and backward kernels for the two block types.

use serde::{Deserialize, Serialize};

/// Shape-level description of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// 3×3 same-padded convolution, ReLU, 2×2 average pooling.
    Conv { in_ch: usize, out_ch: usize, height: usize, width: usize },
    /// Dense layer, optionally followed by ReLU.
    Linear { inputs: usize, outputs: usize, relu: bool },
}

/// Intermediate values a block keeps for its backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCache {
    pub pre: Vec<f64>,
    pub out: Vec<f64>,
}

impl BlockKind {
    pub fn input_len(&self) -> usize {
        match *self {
            Self::Conv { in_ch, height, width, .. } => in_ch * height * width,
            Self::Linear { inputs, .. } => inputs,
        }
    }

    pub fn output_len(&self) -> usize {
        match *self {
            Self::Conv { out_ch, height, width, .. } => out_ch * (height / 2) * (width / 2),
            Self::Linear { outputs, .. } => outputs,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            Self::Conv { in_ch, out_ch, .. } => vec![out_ch, in_ch, 3, 3],
            Self::Linear { inputs, outputs, .. } => vec![outputs, inputs],
        }
    }

    /// Output channels; weight rows are grouped per channel.
    pub fn channels(&self) -> usize {
        match *self {
            Self::Conv { out_ch, .. } => out_ch,
            Self::Linear { outputs, .. } => outputs,
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            Self::Conv { in_ch, .. } => in_ch * 9,
            Self::Linear { inputs, .. } => inputs,
        }
    }

    pub fn forward(&self, w: &[f64], b: &[f64], x: &[f64]) -> BlockCache {
        debug_assert_eq!(x.len(), self.input_len());
        match *self {
            Self::Conv { in_ch, out_ch, height, width } => {
                let pre = conv3x3_forward(x, in_ch, out_ch, height, width, w, b);
                let act: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
                let out = avgpool2_forward(&act, out_ch, height, width);
                BlockCache { pre, out }
            }
            Self::Linear { inputs, outputs, relu } => {
                let mut pre = b.to_vec();
                for (o, p) in pre.iter_mut().enumerate().take(outputs) {
                    let row = &w[o * inputs..(o + 1) * inputs];
                    *p += row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
                }
                let out = if relu { pre.iter().map(|&v| v.max(0.0)).collect() } else { pre.clone() };
                BlockCache { pre, out }
            }
        }
    }

    /// Accumulates weight and bias gradients into `dw`, `db` and returns the
    /// input gradient when `need_dx`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        w: &[f64],
        x: &[f64],
        cache: &BlockCache,
        dout: &[f64],
        dw: &mut [f64],
        db: &mut [f64],
        need_dx: bool,
    ) -> Option<Vec<f64>> {
        match *self {
            Self::Conv { in_ch, out_ch, height, width } => {
                let mut dpre = avgpool2_backward(dout, out_ch, height, width);
                for (d, &p) in dpre.iter_mut().zip(&cache.pre) {
                    if p <= 0.0 {
                        *d = 0.0;
                    }
                }
                conv3x3_backward(x, in_ch, out_ch, height, width, w, &dpre, dw, db, need_dx)
            }
            Self::Linear { inputs, outputs, relu } => {
                let dpre: Vec<f64> = if relu {
                    dout.iter().zip(&cache.pre).map(|(&d, &p)| if p > 0.0 { d } else { 0.0 }).collect()
                } else {
                    dout.to_vec()
                };
                for o in 0..outputs {
                    let g = dpre[o];
                    db[o] += g;
                    if g == 0.0 {
                        continue;
                    }
                    for (d, &v) in dw[o * inputs..(o + 1) * inputs].iter_mut().zip(x) {
                        *d += g * v;
                    }
                }
                need_dx.then(|| {
                    let mut dx = vec![0.0; inputs];
                    for o in 0..outputs {
                        let g = dpre[o];
                        if g == 0.0 {
                            continue;
                        }
                        for (d, &a) in dx.iter_mut().zip(&w[o * inputs..(o + 1) * inputs]) {
                            *d += g * a;
                        }
                    }
                    dx
                })
            }
        }
    }
}

pub(crate) fn conv3x3_forward(
    x: &[f64],
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    b: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; co * h * w];
    for o in 0..co {
        let plane = &mut out[o * h * w..(o + 1) * h * w];
        plane.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..ci {
            let src = &x[i * h * w..(i + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let k = wt[((o * ci + i) * 3 + ky) * 3 + kx];
                    if k == 0.0 {
                        continue;
                    }
                    let (y_lo, y_hi) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                    let (x_lo, x_hi) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                    for y in y_lo..y_hi {
                        let sy = y + ky - 1;
                        let orow = &mut plane[y * w + x_lo..y * w + x_hi];
                        let srow = &src[sy * w + x_lo + kx - 1..sy * w + x_hi + kx - 1];
                        for (o_v, s_v) in orow.iter_mut().zip(srow) {
                            *o_v += k * s_v;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_backward(
    x: &[f64],
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    dpre: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    need_dx: bool,
) -> Option<Vec<f64>> {
    let mut dx = if need_dx { vec![0.0; ci * h * w] } else { Vec::new() };
    for o in 0..co {
        let g = &dpre[o * h * w..(o + 1) * h * w];
        db[o] += g.iter().sum::<f64>();
        for i in 0..ci {
            let src = &x[i * h * w..(i + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let widx = ((o * ci + i) * 3 + ky) * 3 + kx;
                    let (y_lo, y_hi) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                    let (x_lo, x_hi) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                    let mut acc = 0.0;
                    for y in y_lo..y_hi {
                        let sy = y + ky - 1;
                        let grow = &g[y * w + x_lo..y * w + x_hi];
                        let srow = &src[sy * w + x_lo + kx - 1..sy * w + x_hi + kx - 1];
                        acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    dw[widx] += acc;
                    if need_dx {
                        let k = wt[widx];
                        if k == 0.0 {
                            continue;
                        }
                        let dplane = &mut dx[i * h * w..(i + 1) * h * w];
                        for y in y_lo..y_hi {
                            let sy = y + ky - 1;
                            let grow = &g[y * w + x_lo..y * w + x_hi];
                            let drow = &mut dplane[sy * w + x_lo + kx - 1..sy * w + x_hi + kx - 1];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += k * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    need_dx.then_some(dx)
}

pub(crate) fn avgpool2_forward(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for p in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let base = p * h * w + 2 * y * w + 2 * xx;
                out[(p * oh + y) * ow + xx] = 0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]);
            }
        }
    }
    out
}

pub(crate) fn avgpool2_backward(dout: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; c * h * w];
    for p in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let g = 0.25 * dout[(p * oh + y) * ow + xx];
                let base = p * h * w + 2 * y * w + 2 * xx;
                dx[base] = g;
                dx[base + 1] = g;
                dx[base + w] = g;
                dx[base + w + 1] = g;
            }
        }
    }
    dx
}
