use crate::error::{Error, Result};

const MAX_FREQUENCY: f64 = 1000.0;

/// Sinusoidal time features: `(sin(w_0 t), cos(w_0 t), sin(w_1 t), ...)` with
/// frequencies spaced geometrically from 1 to 1000. `t` is expected in `[0, 1]`.
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::input(format!("time embedding dim must be even, got {dim}")));
    }
    let mut out = vec![0.0; dim];
    write_time_embedding(t, &mut out);
    Ok(out)
}

pub(crate) fn write_time_embedding(t: f64, out: &mut [f64]) {
    let half = out.len() / 2;
    for i in 0..half {
        let freq = if half > 1 {
            MAX_FREQUENCY.powf(i as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        let (s, c) = (freq * t).sin_cos();
        out[2 * i] = s;
        out[2 * i + 1] = c;
    }
}
