//! The primitive vocabulary the reconstructors are written in.
//!
//! Reconstruction algorithms are generic over [`Engine`] so the same code
//! runs either on plain buffers ([`Plain`]) or while recording a reverse-mode
//! tape ([`crate::tape::Tape`]). Both engines perform identical floating-point
//! operations, so taped and untaped runs agree bitwise.

use crate::frame::WaveletFrame;
use crate::nuft::NuftOperator;
use crate::types::C64;

pub(crate) trait Engine {
    type Vector: Clone;
    type Scalar: Clone;

    fn vector_value<'v>(&self, v: &'v Self::Vector) -> &'v [C64];
    fn scalar_value(&self, s: &Self::Scalar) -> f64;

    /// Length of image vectors, or of coefficient vectors when `coeffs`.
    fn domain_len(&self, coeffs: bool) -> usize;

    /// A vector that does not depend on the pattern.
    fn constant(&mut self, data: Vec<C64>) -> Self::Vector;
    fn constant_scalar(&mut self, value: f64) -> Self::Scalar;

    /// `A x`
    fn forward(&mut self, x: &Self::Vector) -> Self::Vector;
    /// `A^H y`
    fn adjoint(&mut self, y: &Self::Vector) -> Self::Vector;
    /// `Psi z`
    fn synthesize(&mut self, z: &Self::Vector) -> Self::Vector;
    /// `Psi^H x`
    fn analyze(&mut self, x: &Self::Vector) -> Self::Vector;

    /// `sum_k c_k v_k` with constant real weights.
    fn combine(&mut self, terms: &[(f64, &Self::Vector)]) -> Self::Vector;
    /// `s * v`
    fn scale(&mut self, s: &Self::Scalar, v: &Self::Vector) -> Self::Vector;
    /// `i v`
    fn rotate(&mut self, v: &Self::Vector) -> Self::Vector;
    /// `Re <a, b>`
    fn dot(&mut self, a: &Self::Vector, b: &Self::Vector) -> Self::Scalar;
    fn div(&mut self, a: &Self::Scalar, b: &Self::Scalar) -> Self::Scalar;
    /// `c * s` with constant `c`.
    fn scale_scalar(&mut self, c: f64, s: &Self::Scalar) -> Self::Scalar;
    /// Complex soft-thresholding by the scalar `t`.
    fn soft_threshold(&mut self, v: &Self::Vector, t: &Self::Scalar) -> Self::Vector;
    /// `v / ||v||`
    fn normalize(&mut self, v: &Self::Vector) -> Self::Vector;
}

pub(crate) fn combine_raw(terms: &[(f64, &[C64])]) -> Vec<C64> {
    let len = terms.first().map_or(0, |t| t.1.len());
    let mut out = vec![C64::new(0.0, 0.0); len];
    for (c, v) in terms {
        debug_assert_eq!(v.len(), len);
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += x * *c;
        }
    }
    out
}

pub(crate) fn rotate_raw(v: &[C64]) -> Vec<C64> {
    v.iter().map(|z| C64::new(-z.im, z.re)).collect()
}

pub(crate) fn dot_raw(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
}

pub(crate) fn soft_threshold_raw(v: &[C64], t: f64) -> Vec<C64> {
    v.iter()
        .map(|&z| {
            let mag = z.norm();
            if mag > t {
                z * (1.0 - t / mag)
            } else {
                C64::new(0.0, 0.0)
            }
        })
        .collect()
}

pub(crate) fn normalize_raw(v: &[C64]) -> (Vec<C64>, f64) {
    let n = dot_raw(v, v).sqrt();
    (v.iter().map(|z| z / n).collect(), n)
}

/// Engine that just computes.
pub(crate) struct Plain<'a> {
    op: &'a NuftOperator,
    frame: Option<&'a WaveletFrame>,
}

impl<'a> Plain<'a> {
    pub(crate) fn new(op: &'a NuftOperator, frame: Option<&'a WaveletFrame>) -> Self {
        Self { op, frame }
    }

    fn frame(&self) -> &'a WaveletFrame {
        self.frame.expect("wavelet frame required by this reconstructor")
    }
}

impl Engine for Plain<'_> {
    type Vector = Vec<C64>;
    type Scalar = f64;

    fn vector_value<'v>(&self, v: &'v Vec<C64>) -> &'v [C64] {
        v
    }

    fn scalar_value(&self, s: &f64) -> f64 {
        *s
    }

    fn domain_len(&self, coeffs: bool) -> usize {
        if coeffs {
            self.frame().num_coeffs()
        } else {
            self.op.grid().len()
        }
    }

    fn constant(&mut self, data: Vec<C64>) -> Vec<C64> {
        data
    }

    fn constant_scalar(&mut self, value: f64) -> f64 {
        value
    }

    fn forward(&mut self, x: &Vec<C64>) -> Vec<C64> {
        self.op.forward_raw(x)
    }

    fn adjoint(&mut self, y: &Vec<C64>) -> Vec<C64> {
        self.op.adjoint_raw(y)
    }

    fn synthesize(&mut self, z: &Vec<C64>) -> Vec<C64> {
        self.frame().synthesize_raw(z)
    }

    fn analyze(&mut self, x: &Vec<C64>) -> Vec<C64> {
        self.frame().analyze_raw(x)
    }

    fn combine(&mut self, terms: &[(f64, &Vec<C64>)]) -> Vec<C64> {
        let raw: Vec<(f64, &[C64])> = terms.iter().map(|(c, v)| (*c, v.as_slice())).collect();
        combine_raw(&raw)
    }

    fn scale(&mut self, s: &f64, v: &Vec<C64>) -> Vec<C64> {
        v.iter().map(|z| z * *s).collect()
    }

    fn rotate(&mut self, v: &Vec<C64>) -> Vec<C64> {
        rotate_raw(v)
    }

    fn dot(&mut self, a: &Vec<C64>, b: &Vec<C64>) -> f64 {
        dot_raw(a, b)
    }

    fn div(&mut self, a: &f64, b: &f64) -> f64 {
        a / b
    }

    fn scale_scalar(&mut self, c: f64, s: &f64) -> f64 {
        c * s
    }

    fn soft_threshold(&mut self, v: &Vec<C64>, t: &f64) -> Vec<C64> {
        soft_threshold_raw(v, *t)
    }

    fn normalize(&mut self, v: &Vec<C64>) -> Vec<C64> {
        normalize_raw(v).0
    }
}
