use rand::Rng;

use super::{Element, Tensor};
use crate::error::{Error, Result};

pub fn relu<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Inverted-dropout multipliers: `0` with probability `rate`, otherwise
/// `1 / (1 - rate)`. One uniform draw per element, in order.
pub fn dropout_mask<T: Element, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Result<Vec<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    let keep = T::of(1.0 / (1.0 - rate));
    Ok((0..len).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect())
}

/// Identity in eval mode or at rate 0; inverted dropout otherwise.
pub fn dropout<T: Element, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if !training || rate == 0.0 {
        return Ok(input.clone());
    }
    let mask = dropout_mask(input.numel(), rate, rng)?;
    let mut out = input.clone();
    for (v, m) in out.data_mut().iter_mut().zip(mask) {
        *v = *v * m;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn relu_values() {
        let x = Tensor::<f32>::new(&[2], vec![-3.0, 2.5]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.5]);
    }

    #[test]
    fn dropout_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::from_fn(&[100], |i| i as f32);
        assert_eq!(dropout(&x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 0.5, false, &mut rng).unwrap(), x);
        assert!(dropout(&x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::<f64>::ones(&[1_000_000]);
        let y = dropout(&x, 0.1, true, &mut rng).unwrap();
        let mean = y.sum() / 1e6;
        assert!((0.99..=1.01).contains(&mean), "mean {mean}");
    }

    #[test]
    fn dropout_is_seed_deterministic() {
        let x = Tensor::<f32>::ones(&[64]);
        let a = dropout(&x, 0.3, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = dropout(&x, 0.3, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}
