use crate::error::{Error, Result};
use crate::projector::ImageGrid;

/// Root-mean-square difference of two equally long slices.
pub fn rmse_slice(x: &[f64], o: &[f64]) -> f64 {
    assert_eq!(x.len(), o.len(), "rmse of unequal lengths");
    if x.is_empty() {
        return 0.0;
    }
    let sum: f64 = x.iter().zip(o).map(|(a, b)| (a - b) * (a - b)).sum();
    (sum / x.len() as f64).sqrt()
}

pub fn rmse(x: &ImageGrid, o: &ImageGrid) -> Result<f64> {
    same_shape(x, o)?;
    Ok(rmse_slice(x.pixels(), o.pixels()))
}

/// `20·log10(i_max / rmse)`, or `+∞` for a zero error.
pub fn psnr_from_rmse(rmse: f64, i_max: f64) -> f64 {
    if rmse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (i_max / rmse).log10()
    }
}

pub fn psnr(x: &ImageGrid, o: &ImageGrid, i_max: f64) -> Result<f64> {
    if !(i_max > 0.0 && i_max.is_finite()) {
        return Err(Error::Config(format!("i_max must be positive, got {i_max}")));
    }
    Ok(psnr_from_rmse(rmse(x, o)?, i_max))
}

fn same_shape(x: &ImageGrid, o: &ImageGrid) -> Result<()> {
    if x.width() != o.width() || x.height() != o.height() {
        return Err(Error::Config(format!(
            "metric over {}x{} and {}x{} images",
            x.width(),
            x.height(),
            o.width(),
            o.height()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(v: Vec<f64>) -> ImageGrid {
        let n = v.len();
        ImageGrid::new(n, 1, v).unwrap()
    }

    #[test]
    fn small_cases() {
        let a = img(vec![0.0, 0.0]);
        let b = img(vec![3.0, 4.0]);
        assert_eq!(rmse(&a, &b).unwrap(), 12.5f64.sqrt());
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let c = img(vec![-1.5, -1.5]);
        assert_eq!(rmse(&a, &c).unwrap(), 1.5);
    }

    #[test]
    fn psnr_reference_points() {
        assert_eq!(psnr_from_rmse(2.0, 2.0), 0.0);
        assert!((psnr_from_rmse(0.1, 1.0) - 20.0).abs() < 1e-12);
        let a = img(vec![1.0, 2.0]);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &a, 0.0).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = ImageGrid::zeros(2, 2);
        let b = ImageGrid::zeros(4, 1);
        assert!(rmse(&a, &b).is_err());
    }

    proptest! {
        #[test]
        fn rmse_is_a_metric(
            a in proptest::collection::vec(-10.0f64..10.0, 6),
            b in proptest::collection::vec(-10.0f64..10.0, 6),
            c in proptest::collection::vec(-10.0f64..10.0, 6),
        ) {
            let (ab, ba) = (rmse_slice(&a, &b), rmse_slice(&b, &a));
            prop_assert_eq!(ab, ba);
            prop_assert!(ab <= rmse_slice(&a, &c) + rmse_slice(&c, &b) + 1e-12);
            prop_assert_eq!(ab == 0.0, a == b);
        }

        #[test]
        fn psnr_decreases_with_rmse(r in 1e-6f64..10.0, dr in 1e-6f64..1.0) {
            prop_assert!(psnr_from_rmse(r + dr, 1.0) < psnr_from_rmse(r, 1.0));
        }
    }
}
