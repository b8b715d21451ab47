//! Asymmetric mid-rise floor quantizer `q(v) = Δ·⌊v/Δ⌋` and its integer lattice form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest lattice index magnitude accepted by [`to_integer_lattice`]. Leaves
/// headroom so protocol masses (`2k`) and their sums stay inside `i64`.
const LATTICE_LIMIT: f64 = (1u64 << 52) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuantizerConfig {
    level: f64,
}

impl QuantizerConfig {
    pub fn new(level: f64) -> Result<Self> {
        if !(level.is_finite() && level > 0.0) {
            return Err(Error::InvalidInput(format!(
                "quantization level must be positive and finite, got {level}"
            )));
        }
        Ok(Self { level })
    }

    pub fn level(&self) -> f64 {
        self.level
    }
}

/// Floor index `k` with `Δ·k ≤ v < Δ·(k+1)` evaluated in the same floating
/// arithmetic used to reconstruct the lattice point. The raw `⌊v/Δ⌋` can be off
/// by one when `v/Δ` rounds across an integer.
fn floor_index(v: f64, level: f64) -> f64 {
    let mut k = (v / level).floor();
    if level * k > v {
        k -= 1.0;
    } else if level * (k + 1.0) <= v {
        k += 1.0;
    }
    k
}

fn check_finite(v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(j) => Err(Error::InvalidInput(format!(
            "component {j} is not finite ({})",
            v[j]
        ))),
        None => Ok(()),
    }
}

pub fn quantize(v: &[f64], cfg: QuantizerConfig) -> Result<Vec<f64>> {
    check_finite(v)?;
    Ok(v.iter()
        .map(|&x| cfg.level * floor_index(x, cfg.level))
        .collect())
}

/// Lattice indices `⌊v/Δ⌋`; `quantize(v) == Δ·to_integer_lattice(v)` component-wise.
pub fn to_integer_lattice(v: &[f64], cfg: QuantizerConfig) -> Result<Vec<i64>> {
    check_finite(v)?;
    v.iter()
        .enumerate()
        .map(|(j, &x)| {
            let k = floor_index(x, cfg.level);
            if k.abs() > LATTICE_LIMIT {
                Err(Error::Range(format!(
                    "component {j}: {x} / {} exceeds the lattice range",
                    cfg.level
                )))
            } else {
                Ok(k as i64)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(level: f64) -> QuantizerConfig {
        QuantizerConfig::new(level).unwrap()
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(&[0.25], q(0.1)).unwrap(), vec![0.2]);
        assert_eq!(quantize(&[0.0, 1.0], q(0.5)).unwrap(), vec![0.0, 1.0]);
        assert_eq!(quantize(&[-0.3], q(0.5)).unwrap(), vec![-0.5]);
    }

    #[test]
    fn lattice_examples() {
        assert_eq!(to_integer_lattice(&[0.37], q(0.1)).unwrap(), vec![3]);
        assert_eq!(to_integer_lattice(&[-0.3], q(0.5)).unwrap(), vec![-1]);
        assert_eq!(to_integer_lattice(&[2.0], q(0.5)).unwrap(), vec![4]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(QuantizerConfig::new(0.0).is_err());
        assert!(QuantizerConfig::new(-1.0).is_err());
        assert!(QuantizerConfig::new(f64::NAN).is_err());
        assert!(matches!(
            quantize(&[1.0, f64::INFINITY], q(0.1)),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            to_integer_lattice(&[1e300], q(1e-9)),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn lattice_points_are_fixed() {
        for level in [0.1, 1e-4, 1e-6, 0.3, 0.5] {
            for k in -1000i64..1000 {
                let p = level * k as f64;
                assert_eq!(quantize(&[p], q(level)).unwrap()[0], p, "Δ={level} k={k}");
                assert_eq!(to_integer_lattice(&[p], q(level)).unwrap()[0], k);
            }
        }
    }

    proptest! {
        #[test]
        fn bounded_error_and_idempotence(
            v in prop::collection::vec(-1e3f64..1e3, 1..8),
            exp in -9i32..1,
            mant in 1.0f64..9.9,
        ) {
            let cfg = q(mant * 10f64.powi(exp));
            let out = quantize(&v, cfg).unwrap();
            for (x, y) in v.iter().zip(&out) {
                prop_assert!(*y <= *x);
                prop_assert!(x - y < cfg.level());
            }
            prop_assert_eq!(quantize(&out, cfg).unwrap(), out.clone());
            let lattice = to_integer_lattice(&v, cfg).unwrap();
            for (k, y) in lattice.iter().zip(&out) {
                prop_assert_eq!(cfg.level() * *k as f64, *y);
            }
        }
    }
}
