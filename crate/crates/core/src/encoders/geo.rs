//! Equal Earth projection and random Fourier features for coordinates.

use crate::error::{Error, Result};
use crate::numcore::{DenseMatrix, SeededRng};

const A1: f64 = 1.340264;
const A2: f64 = -0.081106;
const A3: f64 = 0.000893;
const A4: f64 = 0.003796;

/// Equal Earth forward projection on the unit sphere.
///
/// Returns planar `(x, y)` with x in about `[-2.7066, 2.7066]` and y in
/// about `[-1.3173, 1.3173]`.
pub fn eep_project(lat: f64, lon: f64) -> Result<(f64, f64)> {
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(Error::Domain(format!(
            "coordinates out of range: lat {lat}, lon {lon}"
        )));
    }
    let m = 3f64.sqrt() / 2.0;
    let theta = (m * lat.to_radians().sin()).asin();
    let t2 = theta * theta;
    let t6 = t2 * t2 * t2;
    let x = 2.0 * 3f64.sqrt() * lon.to_radians() * theta.cos()
        / (3.0 * (9.0 * A4 * t6 * t2 + 7.0 * A3 * t6 + 3.0 * A2 * t2 + A1));
    let y = theta * (A1 + A2 * t2 + t6 * (A3 + A4 * t2));
    Ok((x, y))
}

/// Extreme absolute values of the projection: `(x at lon = 180 on the
/// equator, y at the pole)`.
pub fn eep_extent() -> (f64, f64) {
    let (x, _) = eep_project(0.0, 180.0).expect("in range");
    let (_, y) = eep_project(90.0, 0.0).expect("in range");
    (x, y)
}

/// Projected coordinates rescaled so each axis spans `[-1, 1]`.
pub fn eep_project_unit(lat: f64, lon: f64) -> Result<(f64, f64)> {
    let (x, y) = eep_project(lat, lon)?;
    let (xm, ym) = eep_extent();
    Ok((x / xm, y / ym))
}

/// Frozen Gaussian frequency matrix, `count x 2`. Entries are rounded to
/// `f32` so they survive a checkpoint unchanged.
pub fn sample_frequencies(count: usize, scale: f64, rng: &mut SeededRng) -> DenseMatrix {
    let data = (0..count * 2).map(|_| (scale * rng.normal()) as f32 as f64).collect();
    DenseMatrix::new(count, 2, data).expect("finite gaussian draws")
}

/// `[cos(f_0 . xy), sin(f_0 . xy), cos(f_1 . xy), sin(f_1 . xy), ...]`
pub fn rff_transform(xy: (f64, f64), freqs: &DenseMatrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(freqs.rows() * 2);
    for r in 0..freqs.rows() {
        let phase = freqs.get(r, 0) * xy.0 + freqs.get(r, 1) * xy.1;
        out.push(phase.cos());
        out.push(phase.sin());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference Equal Earth forward written directly from the published
    /// polynomial, in expanded power form.
    fn reference_equal_earth(lat_deg: f64, lon_deg: f64) -> (f64, f64) {
        let phi = lat_deg * std::f64::consts::PI / 180.0;
        let lam = lon_deg * std::f64::consts::PI / 180.0;
        let th = ((3.0f64).sqrt() / 2.0 * phi.sin()).asin();
        let denom = 3.0
            * (9.0 * 0.003796 * th.powi(8) + 7.0 * 0.000893 * th.powi(6) + 3.0 * -0.081106 * th.powi(2)
                + 1.340264);
        let x = 2.0 * (3.0f64).sqrt() * lam * th.cos() / denom;
        let y = 0.003796 * th.powi(9) + 0.000893 * th.powi(7) + -0.081106 * th.powi(3) + 1.340264 * th;
        (x, y)
    }

    #[test]
    fn origin_is_fixed() {
        assert_eq!(eep_project(0.0, 0.0).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn odd_in_latitude() {
        for &(lat, lon) in &[(10.0, 20.0), (45.0, -170.0), (89.0, 3.0), (33.3, 180.0)] {
            let (x1, y1) = eep_project(lat, lon).unwrap();
            let (x2, y2) = eep_project(-lat, lon).unwrap();
            assert_eq!(x1, x2);
            assert_eq!(y1, -y2);
        }
    }

    #[test]
    fn matches_reference_polynomial() {
        let (x, y) = eep_project(45.0, 90.0).unwrap();
        let (rx, ry) = reference_equal_earth(45.0, 90.0);
        assert!((x - rx).abs() < 1e-9 && (y - ry).abs() < 1e-9, "{x},{y} vs {rx},{ry}");
        // frozen from an out-of-tree evaluation of the same polynomial
        assert!((x - 1.159_854_499_102_983_5).abs() < 1e-9);
        assert!((y - 0.860_231_085_522_010_2).abs() < 1e-9);
        for lat in [-90.0, -60.0, -12.5, 0.0, 30.0, 75.0, 90.0] {
            for lon in [-180.0, -45.0, 0.0, 120.0, 180.0] {
                let (x, y) = eep_project(lat, lon).unwrap();
                let (rx, ry) = reference_equal_earth(lat, lon);
                assert!((x - rx).abs() < 1e-9 && (y - ry).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn extent_values() {
        let (xm, ym) = eep_extent();
        assert!((xm - 2.706_629_983_696_074).abs() < 1e-12, "{xm}");
        assert!((ym - 1.317_362_759_157_413).abs() < 1e-12, "{ym}");
        let (ux, uy) = eep_project_unit(90.0, 180.0).unwrap();
        assert!(ux.abs() <= 1.0 && (uy - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(matches!(eep_project(91.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(eep_project(0.0, -180.5), Err(Error::Domain(_))));
        assert!(eep_project(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn rff_identities() {
        let freqs = sample_frequencies(16, 4.0, &mut SeededRng::new(2));
        let f = rff_transform((0.3, -0.7), &freqs);
        assert_eq!(f.len(), 32);
        for pair in f.chunks(2) {
            assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() < 1e-12);
        }
        let z = rff_transform((0.0, 0.0), &freqs);
        for pair in z.chunks(2) {
            assert_eq!(pair[0], 1.0);
            assert_eq!(pair[1], 0.0);
        }
        let again = rff_transform((0.3, -0.7), &sample_frequencies(16, 4.0, &mut SeededRng::new(2)));
        assert_eq!(f, again);
    }
}
