use std::f64::consts::PI;

/// `[sin(2^0 pi t), cos(2^0 pi t), ..., sin(2^(L-1) pi t), cos(2^(L-1) pi t)]`.
pub fn positional_encoding(t: f64, bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * bands);
    encode_into(t, bands, &mut out);
    out
}

pub fn encode_into(t: f64, bands: usize, out: &mut Vec<f64>) {
    let mut freq = PI;
    for _ in 0..bands {
        let (s, c) = (freq * t).sin_cos();
        out.push(s);
        out.push(c);
        freq *= 2.0;
    }
}

/// Backward of [`encode_into`]: `dL/dt` from gradients on the `2L` outputs.
pub fn encode_vjp(t: f64, bands: usize, d_out: &[f64]) -> f64 {
    let mut freq = PI;
    let mut dt = 0.0;
    for k in 0..bands {
        let (s, c) = (freq * t).sin_cos();
        dt += d_out[2 * k] * freq * c - d_out[2 * k + 1] * freq * s;
        freq *= 2.0;
    }
    dt
}
