//! Cayley–Dickson hypercomplex numbers of dimension `2^n`, stored as plain
//! coefficient slices.
//!
//! Product convention: `(a, b)(c, d) = (ac - conj(d) b, d a + b conj(c))`,
//! conjugate `(a, b)* = (a*, -b)`.

pub fn conj(x: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = x.iter().map(|v| -v).collect();
    out[0] = x[0];
    out
}

pub fn mul(x: &[f64], y: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), y.len());
    debug_assert!(x.len().is_power_of_two());
    let n = x.len();
    if n == 1 {
        return vec![x[0] * y[0]];
    }
    let h = n / 2;
    let (a, b) = x.split_at(h);
    let (c, d) = y.split_at(h);
    let ac = mul(a, c);
    let db = mul(&conj(d), b);
    let da = mul(d, a);
    let bc = mul(b, &conj(c));
    let mut out = Vec::with_capacity(n);
    out.extend(ac.iter().zip(&db).map(|(p, q)| p - q));
    out.extend(da.iter().zip(&bc).map(|(p, q)| p + q));
    out
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complex_and_quaternion_products() {
        // (1 + 2i)(3 - i) = 5 + 5i
        assert_eq!(mul(&[1.0, 2.0], &[3.0, -1.0]), vec![5.0, 5.0]);
        // quaternion units: i j = k for this construction
        let i = [0.0, 1.0, 0.0, 0.0];
        let j = [0.0, 0.0, 1.0, 0.0];
        let ij = mul(&i, &j);
        let ji = mul(&j, &i);
        assert_eq!(ij.iter().map(|v| v.abs()).sum::<f64>(), 1.0);
        assert_eq!(ij, ji.iter().map(|v| -v).collect::<Vec<_>>());
    }

    #[test]
    fn norm_is_multiplicative_up_to_octonions() {
        let x = [0.3, -1.0, 0.5, 2.0, 0.1, 0.0, -0.7, 1.1];
        let y = [1.0, 0.2, -0.4, 0.0, 0.9, -1.3, 0.6, 0.25];
        assert!((norm(&mul(&x, &y)) - norm(&x) * norm(&y)).abs() < 1e-12);
        let xc = mul(&x, &conj(&x));
        assert!((xc[0] - norm(&x).powi(2)).abs() < 1e-12);
        assert!(xc[1..].iter().all(|v| v.abs() < 1e-12));
    }
}
