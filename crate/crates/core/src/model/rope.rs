//! Rotary position embedding in the half-split layout: pair `i` is
//! `(z[i], z[i + d_h/2])`, rotated by `θ_i = t · base^(-2i/d_h)`.

use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, Tensor, Var};

pub fn rope_angle(pair: usize, t: usize, base: f64, d_h: usize) -> f64 {
    t as f64 * base.powf(-2.0 * pair as f64 / d_h as f64)
}

fn check_even(d_h: usize) -> Result<()> {
    if d_h == 0 || !d_h.is_multiple_of(2) {
        return Err(Error::Config(format!("RoPE needs an even head width, got d_h = {d_h}")));
    }
    Ok(())
}

/// Rotates one head vector at position `t`.
pub fn rope_rotate<F: Float>(z: &[F], t: usize, base: f64) -> Result<Vec<F>> {
    let d_h = z.len();
    check_even(d_h)?;
    let half = d_h / 2;
    let mut out = vec![F::zero(); d_h];
    for i in 0..half {
        let theta = rope_angle(i, t, base, d_h);
        let (s, c) = (F::lit(theta.sin()), F::lit(theta.cos()));
        let (re, im) = (z[i], z[i + half]);
        out[i] = re * c + (-im) * s;
        out[i + half] = im * c + re * s;
    }
    Ok(out)
}

/// Per-position `cos`/`sin` tables of shape `[seq, d_h]`, repeated across
/// both halves so they broadcast against `[.., seq, d_h]` head states.
#[derive(Debug, Clone)]
pub struct RopeTables<F> {
    pub cos: Tensor<F>,
    pub sin: Tensor<F>,
}

impl<F: Float> RopeTables<F> {
    pub fn new(seq: usize, d_h: usize, base: f64) -> Result<Self> {
        check_even(d_h)?;
        let half = d_h / 2;
        let angle = |idx: usize| rope_angle((idx % d_h) % half, idx / d_h, base, d_h);
        Ok(RopeTables {
            cos: Tensor::from_fn(&[seq, d_h], |idx| F::lit(angle(idx).cos())),
            sin: Tensor::from_fn(&[seq, d_h], |idx| F::lit(angle(idx).sin())),
        })
    }

    /// `z ⊙ cos + rotate_half(z) ⊙ sin` with `rotate_half(z) = [-z_imag, z_real]`.
    pub fn apply(&self, g: &mut Graph<F>, z: Var) -> Result<Var> {
        let d_h = g.value(z).last_dim();
        let half = d_h / 2;
        let re = g.slice_last(z, 0, half)?;
        let im = g.slice_last(z, half, d_h)?;
        let neg_im = g.scale(im, -F::one())?;
        let rotated = g.concat_last(&[neg_im, re])?;
        let cos = g.constant(self.cos.clone());
        let sin = g.constant(self.sin.clone());
        let a = g.mul(z, cos)?;
        let b = g.mul(rotated, sin)?;
        g.add(a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn position_zero_is_identity() {
        let z = [0.3, -1.0, 2.0, 0.25, 7.0, -3.5];
        assert_eq!(rope_rotate(&z, 0, 10000.0).unwrap(), z.to_vec());
    }

    #[test]
    fn complex_multiplication_oracle() {
        // (z_re + i z_im) * e^{iθ} for each pair
        let z = [1.0, 0.0, 0.0, 0.0];
        let out = rope_rotate(&z, 1, 10000.0).unwrap();
        let want = [1f64.cos(), 0.0, 1f64.sin(), 0.0];
        for (a, b) in out.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{out:?}");
        }
        assert!((out[0] - 0.5403).abs() < 1e-4 && (out[2] - 0.8415).abs() < 1e-4);

        let z = [0.5, -1.5, 2.0, 0.75];
        let t = 13;
        let out = rope_rotate(&z, t, 500.0).unwrap();
        for i in 0..2 {
            let th = t as f64 * 500f64.powf(-2.0 * i as f64 / 4.0);
            let (re, im) = (z[i], z[i + 2]);
            let want_re = re * th.cos() - im * th.sin();
            let want_im = re * th.sin() + im * th.cos();
            assert!((out[i] - want_re).abs() < 1e-14);
            assert!((out[i + 2] - want_im).abs() < 1e-14);
        }
    }

    #[test]
    fn odd_width_is_a_config_error() {
        assert!(matches!(rope_rotate(&[1.0f64, 2.0, 3.0], 1, 10000.0), Err(Error::Config(_))));
    }

    #[test]
    fn norm_is_preserved() {
        let z: Vec<f64> = (0..16).map(|i| (i as f64 * 1.7).sin() * 3.0).collect();
        for t in [1, 5, 63, 1000] {
            let out = rope_rotate(&z, t, 10000.0).unwrap();
            assert!((norm(&out) - norm(&z)).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_tables_match_direct_rotation() {
        let (seq, d_h) = (5, 8);
        let tables = RopeTables::<f64>::new(seq, d_h, 10000.0).unwrap();
        let z = Tensor::from_fn(&[2, seq, d_h], |i| ((i * 7 % 13) as f64 - 6.0) / 3.0);
        let mut g = Graph::new();
        let v = g.constant(z.clone());
        let out = tables.apply(&mut g, v).unwrap();
        let got = g.value(out).data();
        for b in 0..2 {
            for t in 0..seq {
                let off = (b * seq + t) * d_h;
                let want = rope_rotate(&z.data()[off..off + d_h], t, 10000.0).unwrap();
                assert_eq!(&got[off..off + d_h], &want[..]);
            }
        }
    }
}
