//! Vector and matrix norms.

use std::fmt;
use std::str::FromStr;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::diffcore::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NormError {
    #[error("norm exponent must be >= 1, got {0}")]
    BadExponent(f64),
    #[error("unsupported norm: {0}")]
    Unsupported(String),
    #[error("expected a matrix, got shape {0:?}")]
    NotAMatrix(Vec<usize>),
}

/// A norm exponent `p` in `[1, ∞]`. Serialized as a number or `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct PNorm(f64);

impl PNorm {
    pub const ONE: PNorm = PNorm(1.0);
    pub const TWO: PNorm = PNorm(2.0);
    pub const INF: PNorm = PNorm(f64::INFINITY);

    pub fn new(p: f64) -> Result<Self, NormError> {
        if p >= 1.0 {
            Ok(PNorm(p))
        } else {
            Err(NormError::BadExponent(p))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_inf(self) -> bool {
        self.0.is_infinite()
    }

    /// `1/p`, with `1/∞ = 0`.
    pub fn recip(self) -> f64 {
        if self.is_inf() {
            0.0
        } else {
            1.0 / self.0
        }
    }

    /// The dual exponent `p*` with `1/p + 1/p* = 1`.
    pub fn dual(self) -> PNorm {
        let r = 1.0 - self.recip();
        if r == 0.0 {
            PNorm::INF
        } else {
            PNorm(1.0 / r)
        }
    }
}

impl fmt::Display for PNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_inf() {
            write!(f, "inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl FromStr for PNorm {
    type Err = NormError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "inf" | "Inf" | "infinity" => Ok(PNorm::INF),
            t => t
                .parse::<f64>()
                .map_err(|_| NormError::Unsupported(t.to_string()))
                .and_then(PNorm::new),
        }
    }
}

impl Serialize for PNorm {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.is_inf() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for PNorm {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(p) => PNorm::new(p).map_err(de::Error::custom),
            Raw::Str(s) => s.parse().map_err(de::Error::custom),
        }
    }
}

pub fn vector_norm(x: &[f64], p: PNorm) -> f64 {
    if p.is_inf() {
        x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    } else if p.0 == 1.0 {
        x.iter().map(|v| v.abs()).sum()
    } else if p.0 == 2.0 {
        x.iter().map(|v| v * v).sum::<f64>().sqrt()
    } else {
        x.iter().map(|v| v.abs().powf(p.0)).sum::<f64>().powf(1.0 / p.0)
    }
}

/// Conversion factor `n^{|1/p - 1/q|}` between `ℓp` and `ℓq` norms in `n` dimensions.
pub fn conversion_factor(p: PNorm, q: PNorm, n: usize) -> f64 {
    (n as f64).powf((p.recip() - q.recip()).abs())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatrixNorm {
    /// Operator norm induced by `ℓp`, for `p ∈ {1, 2, ∞}`.
    Induced(PNorm),
    Frobenius,
    /// Maximum row `ℓ1` norm.
    OneInf,
    /// `ℓb` norm of the vector of row `ℓa` norms.
    Group(PNorm, PNorm),
}

pub fn matrix_norm(a: &Tensor, which: MatrixNorm) -> Result<f64, NormError> {
    if a.shape().len() != 2 {
        return Err(NormError::NotAMatrix(a.shape().to_vec()));
    }
    let rows = a.rows();
    match which {
        MatrixNorm::Frobenius => Ok(vector_norm(a.data(), PNorm::TWO)),
        MatrixNorm::OneInf => Ok(group_norm(a, PNorm::ONE, PNorm::INF)),
        MatrixNorm::Group(ga, gb) => Ok(group_norm(a, ga, gb)),
        MatrixNorm::Induced(p) if p.is_inf() => Ok((0..rows)
            .map(|i| vector_norm(a.row(i), PNorm::ONE))
            .fold(0.0, f64::max)),
        MatrixNorm::Induced(p) if p.0 == 1.0 => {
            let mut col = vec![0.0; a.cols()];
            for i in 0..rows {
                for (c, v) in col.iter_mut().zip(a.row(i)) {
                    *c += v.abs();
                }
            }
            Ok(col.into_iter().fold(0.0, f64::max))
        }
        MatrixNorm::Induced(p) if p.0 == 2.0 => Ok(spectral_norm(a)),
        MatrixNorm::Induced(p) => Err(NormError::Unsupported(format!("induced ℓ{p} norm"))),
    }
}

fn group_norm(a: &Tensor, inner: PNorm, outer: PNorm) -> f64 {
    let rows: Vec<f64> = (0..a.rows()).map(|i| vector_norm(a.row(i), inner)).collect();
    vector_norm(&rows, outer)
}

/// Largest singular value by power iteration on `AᵀA`.
fn spectral_norm(a: &Tensor) -> f64 {
    let n = a.cols();
    // fixed, non-degenerate start vector
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + ((i as f64 + 1.0) * 0.618_033_988_75).fract()).collect();
    let mut lambda = 0.0f64;
    for _ in 0..100_000 {
        let nv = vector_norm(&v, PNorm::TWO);
        if nv == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        let av = a.matvec(&v);
        let next = av.iter().map(|x| x * x).sum::<f64>();
        v = a.matvec_t(&av);
        let converged = (next - lambda).abs() <= 1e-15 * next.max(f64::MIN_POSITIVE);
        lambda = next;
        if converged {
            break;
        }
    }
    lambda.sqrt()
}
