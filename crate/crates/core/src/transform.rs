//! Orthonormal DCT-II / DCT-III pair and the frequency-domain perturbation
//! `y' = idct(dct(y) + P)`.
//!
//! With `s_0 = sqrt(1/N)` and `s_k = sqrt(2/N)` both transforms are
//! isometries and exact inverses of each other, so the perturbation moves a
//! signal by exactly `||P||` in the Euclidean norm.

use std::f64::consts::PI;

use crate::error::{shape_err, Error, Result};

/// DCT-II coefficients of a signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum(pub Vec<f64>);

impl Spectrum {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[inline]
fn scale(k: usize, n: usize) -> f64 {
    if k == 0 {
        (1.0 / n as f64).sqrt()
    } else {
        (2.0 / n as f64).sqrt()
    }
}

#[inline]
fn basis(n: usize, k: usize, len: usize) -> f64 {
    (PI / len as f64 * (n as f64 + 0.5) * k as f64).cos()
}

pub fn dct(x: &[f64]) -> Result<Spectrum> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("dct of an empty signal".into()));
    }
    let n = x.len();
    let out = (0..n)
        .map(|k| {
            let s: f64 = x.iter().enumerate().map(|(i, &v)| v * basis(i, k, n)).sum();
            scale(k, n) * s
        })
        .collect();
    Ok(Spectrum(out))
}

pub fn idct(spectrum: &Spectrum) -> Result<Vec<f64>> {
    let c = &spectrum.0;
    if c.is_empty() {
        return Err(Error::InvalidArgument("idct of an empty spectrum".into()));
    }
    let n = c.len();
    Ok((0..n)
        .map(|i| {
            c.iter()
                .enumerate()
                .map(|(k, &v)| scale(k, n) * v * basis(i, k, n))
                .sum()
        })
        .collect())
}

/// `idct(dct(y) + p)`.
pub fn perturb(y: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    if y.len() != p.len() {
        return Err(shape_err!(
            "signal length {} vs perturbation length {}",
            y.len(),
            p.len()
        ));
    }
    let mut spec = dct(y)?;
    for (s, &d) in spec.0.iter_mut().zip(p) {
        *s += d;
    }
    idct(&spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn dct_examples() {
        assert_eq!(dct(&[2.5]).unwrap().0, vec![2.5]);

        let c = dct(&[1.5; 9]).unwrap();
        assert!((c.0[0] - 1.5 * 3.0).abs() < 1e-12);
        assert!(c.0[1..].iter().all(|v| v.abs() < 1e-12));

        let c = dct(&[1.0, 0.0]).unwrap();
        // sqrt(1/2) * cos(0) and sqrt(2/2) * cos(pi/4)
        assert!((c.0[0] - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((c.0[1] - (PI / 4.0).cos()).abs() < 1e-15);
        assert!((c.0[1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);

        assert!(dct(&[]).is_err());
        assert!(idct(&Spectrum(vec![])).is_err());
    }

    #[test]
    fn idct_examples() {
        let x = idct(&Spectrum(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        for v in x {
            assert!((v - 0.5).abs() < 1e-15);
        }
        let x = idct(&Spectrum(vec![0.0, 1.0])).unwrap();
        assert!((x[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((x[1] + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn perturb_examples() {
        let y = [0.3, -1.2, 2.0, 0.7];
        let out = perturb(&y, &[0.0; 4]).unwrap();
        for (a, b) in out.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
        let out = perturb(&[1.0, 0.0], &[0.0, 0.1]).unwrap();
        // y + 0.1 * (cos(pi/4), -cos(pi/4))
        let d = 0.1 * (PI / 4.0).cos();
        assert!((out[0] - (1.0 + d)).abs() < 1e-12);
        assert!((out[1] + d).abs() < 1e-12);
        assert!((out[0] - 1.0707107).abs() < 1e-7);
        assert!(perturb(&[1.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_and_parseval(x in proptest::collection::vec(-10.0f64..10.0, 1..128)) {
            let c = dct(&x).unwrap();
            prop_assert!((norm(&c.0) - norm(&x)).abs() < 1e-10);
            let back = idct(&c).unwrap();
            for (a, b) in back.iter().zip(&x) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn linearity(
            pair in (1usize..48).prop_flat_map(|n| (
                proptest::collection::vec(-5.0f64..5.0, n),
                proptest::collection::vec(-5.0f64..5.0, n),
            )),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let (x, y) = pair;
            let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
            let lhs = dct(&mix).unwrap();
            let (cx, cy) = (dct(&x).unwrap(), dct(&y).unwrap());
            for k in 0..x.len() {
                prop_assert!((lhs.0[k] - (a * cx.0[k] + b * cy.0[k])).abs() < 1e-12);
            }
        }

        #[test]
        fn perturbation_energy(
            pair in (1usize..40).prop_flat_map(|n| (
                proptest::collection::vec(-5.0f64..5.0, n),
                proptest::collection::vec(-1.0f64..1.0, n),
            )),
        ) {
            let (y, p) = pair;
            let out = perturb(&y, &p).unwrap();
            let diff: Vec<f64> = out.iter().zip(&y).map(|(a, b)| a - b).collect();
            prop_assert!((norm(&diff) - norm(&p)).abs() < 1e-10);
        }
    }
}
