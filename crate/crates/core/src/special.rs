//! Gamma-function helpers for negative fractional arguments.

use statrs::function::gamma as sg;

pub fn gamma(x: f64) -> f64 {
    sg::gamma(x)
}

/// `|Γ(-s)| = Γ(1-s)/s` for `s ∈ (0, 1)`.
pub fn neg_gamma_abs(s: f64) -> f64 {
    sg::gamma(1.0 - s) / s
}

/// Upper incomplete gamma `Γ(-s, x)` for `s ∈ (0, 1)`, `x > 0`, from
/// `Γ(a+1, x) = aΓ(a, x) + x^a e^{-x}` at `a = -s`.
pub fn upper_incomplete_gamma_neg(s: f64, x: f64) -> f64 {
    if x > 700.0 {
        return 0.0;
    }
    (x.powf(-s) * (-x).exp() - sg::gamma_ui(1.0 - s, x)) / s
}

/// `∫_T^∞ e^{-a/t} t^{-1-s} dt = a^{-s} γ(s, a/T)` by its series, valid for
/// small `a/T`.
pub fn poisson_zero_mode_tail(a: f64, t_max: f64, s: f64) -> f64 {
    let x = a / t_max;
    let mut term = 1.0;
    let mut sum = 1.0 / s;
    for k in 1..100 {
        term *= -x / k as f64;
        let add = term / (s + k as f64);
        sum += add;
        if add.abs() < 1e-18 * sum.abs() {
            break;
        }
    }
    t_max.powf(-s) * sum
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_identities() {
        // Γ(-1/2) = -2√π
        assert!((neg_gamma_abs(0.5) - 2.0 * std::f64::consts::PI.sqrt()).abs() < 1e-13);
        // Γ(-s, x) → Γ(-s) + x^{-s}/s as x → 0 is not finite; check a moderate value by quadrature
        let (s, x) = (0.3, 0.7);
        let n = 400_000;
        let mut acc = 0.0;
        // ∫_x^∞ e^{-t} t^{-1-s} dt with t = x + u/(1-u)
        for k in 0..n {
            let u = (k as f64 + 0.5) / n as f64;
            let t = x + u / (1.0 - u);
            let jac = 1.0 / (1.0 - u).powi(2);
            acc += (-t).exp() * t.powf(-1.0 - s) * jac / n as f64;
        }
        assert!((upper_incomplete_gamma_neg(s, x) - acc).abs() < 1e-7);
    }

    #[test]
    fn zero_mode_tail_series() {
        let (a, t, s): (f64, f64, f64) = (0.25, 1e3, 0.4);
        let direct = a.powf(-s) * sg::gamma_li(s, a / t);
        assert!((poisson_zero_mode_tail(a, t, s) - direct).abs() < 1e-12 * direct);
    }
}
