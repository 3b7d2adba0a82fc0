//! Brute-force reference values computed by plain trapezoid sums, sharing no
//! code with the library's quadrature or eigensolvers.

use std::f64::consts::PI;

use crate::report::number;

/// `∫ f` over `[a, b]` with `n` trapezoid nodes.
pub fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / (n - 1) as f64;
    let inner: f64 = (1..n - 1).map(|i| f(a + h * i as f64)).sum();
    h * (inner + 0.5 * (f(a) + f(b)))
}

/// `−log ∫ e^{−½(x+y)²} γ_c(dy)` for the quadratic base potential.
pub fn quadratic_renormalized(x: f64, c: f64) -> f64 {
    let sd = c.sqrt();
    let z = trapezoid(
        |y| (-0.5 * (x + y) * (x + y) - 0.5 * y * y / c).exp() / (2.0 * PI * c).sqrt(),
        -12.0 * sd,
        12.0 * sd,
        4001,
    );
    -z.ln()
}

/// `(V, V', V'')` of the quadratic case by central differences.
pub fn quadratic_derivatives(x: f64, c: f64) -> (f64, f64, f64) {
    let h = 1e-3;
    let v = quadratic_renormalized(x, c);
    let vp = quadratic_renormalized(x + h, c);
    let vm = quadratic_renormalized(x - h, c);
    (v, (vp - vm) / (2.0 * h), (vp - 2.0 * v + vm) / (h * h))
}

/// Second moment of `e^{−¼gx⁴ − ½mx²}` on the line.
pub fn single_site_second_moment(g: f64, m: f64) -> f64 {
    let w = |x: f64| (-0.25 * g * x.powi(4) - 0.5 * m * x * x).exp();
    let z = trapezoid(w, -10.0, 10.0, 401);
    trapezoid(|x| x * x * w(x), -10.0, 10.0, 401) / z
}

/// Covariance of `exp(−½⟨φ,Mφ⟩ − Σ¼gφᵢ⁴ + ⟨b,φ⟩)` on the plane, tensor trapezoid.
pub fn two_site_covariance(m: [[f64; 2]; 2], g: f64, b: [f64; 2]) -> [[f64; 2]; 2] {
    let n = 401;
    let (lo, hi) = (-8.0, 8.0);
    let h = (hi - lo) / (n - 1) as f64;
    let mut s = [0.0; 6];
    for i in 0..n {
        let x = lo + h * i as f64;
        let wi = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        for j in 0..n {
            let y = lo + h * j as f64;
            let wj = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
            let e = -0.5 * (m[0][0] * x * x + 2.0 * m[0][1] * x * y + m[1][1] * y * y)
                - 0.25 * g * (x.powi(4) + y.powi(4))
                + b[0] * x
                + b[1] * y;
            let w = wi * wj * e.exp();
            s[0] += w;
            s[1] += w * x;
            s[2] += w * y;
            s[3] += w * x * x;
            s[4] += w * x * y;
            s[5] += w * y * y;
        }
    }
    let (mx, my) = (s[1] / s[0], s[2] / s[0]);
    let cxy = s[4] / s[0] - mx * my;
    [[s[3] / s[0] - mx * mx, cxy], [cxy, s[5] / s[0] - my * my]]
}

/// Named reference values.
pub fn reference_values() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let (v, g, h) = quadratic_derivatives(1.0, 1.0);
    out.push(("quadratic.value(x=1,c=1)".into(), v));
    out.push(("quadratic.gradient(x=1,c=1)".into(), g));
    out.push(("quadratic.hessian(x=1,c=1)".into(), h));
    for k in 1..=4 {
        out.push((format!("ou.mu_{k}"), k as f64));
    }
    // g = 1, ν = 0, A = 1, t = 1: mass A + ν + 1/t = 2.
    out.push(("phi4.chi(g=1,nu=0,a=1,t=1)".into(), single_site_second_moment(1.0, 2.0)));
    out.push(("gaussian.chi(a=1,t=1)".into(), single_site_second_moment(0.0, 2.0)));
    // A = [[2,−1],[−1,2]], t = 1: M = A + 1, field C_t⁻¹φ = Mφ.
    let m = [[3.0, -1.0], [-1.0, 3.0]];
    let phi = [0.3, -0.2];
    let b = [m[0][0] * phi[0] + m[0][1] * phi[1], m[1][0] * phi[0] + m[1][1] * phi[1]];
    let cov = two_site_covariance(m, 1.0, b);
    out.push(("phi4.sigma_00(n=2,phi=(0.3,-0.2),t=1)".into(), cov[0][0]));
    out.push(("phi4.sigma_01(n=2,phi=(0.3,-0.2),t=1)".into(), cov[0][1]));
    out.push(("phi4.sigma_11(n=2,phi=(0.3,-0.2),t=1)".into(), cov[1][1]));
    out.push(("heat.uniform.poincare(s=0)".into(), 4.0 / (PI * PI)));
    out.push(("heat.gaussian.poincare(s=1)".into(), 2.0));
    out
}

pub fn reference_csv() -> String {
    let mut out = String::from("name,value\n");
    for (name, v) in reference_values() {
        out.push_str(&format!("\"{name}\",{}\n", number(v)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_closed_form() {
        // V_1(x) = x²/4 + ½ log 2
        let (v, g, h) = quadratic_derivatives(1.0, 1.0);
        assert!((v - (0.25 + 0.5 * 2f64.ln())).abs() < 1e-12);
        assert!((g - 0.5).abs() < 1e-6);
        assert!((h - 0.5).abs() < 1e-4);
    }

    #[test]
    fn gaussian_moments_are_inverse_masses() {
        assert!((single_site_second_moment(0.0, 2.0) - 0.5).abs() < 1e-12);
        let c = two_site_covariance([[3.0, -1.0], [-1.0, 3.0]], 0.0, [0.4, 0.1]);
        assert!((c[0][0] - 3.0 / 8.0).abs() < 1e-10);
        assert!((c[0][1] - 1.0 / 8.0).abs() < 1e-10);
    }
}
