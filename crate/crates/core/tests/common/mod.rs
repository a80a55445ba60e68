#![allow(dead_code)]

use dashu_float::FBig;

const BITS: usize = 256;

fn big(x: f64) -> FBig {
    FBig::try_from(x).unwrap().with_precision(BITS).value()
}

fn big_n(n: usize) -> FBig {
    big(n as f64)
}

fn to_f64(x: FBig) -> f64 {
    x.to_f64().value()
}

/// `2B·√(2·ln(2(L+2)/δ)/n)` in 256-bit arithmetic.
pub fn h1_oracle(b: f64, l: usize, delta: f64, n: usize) -> f64 {
    let two = big(2.0);
    let log = (two.clone() * (big_n(l) + two.clone()) / big(delta)).ln();
    to_f64(two.clone() * big(b) * (two * log / big_n(n)).sqrt())
}

fn concentration(l_offset: f64, b: f64, l: usize, delta: f64) -> FBig {
    let two = big(2.0);
    let log = (two.clone() * (big_n(l) + big(l_offset)) / big(delta)).ln();
    big(b) * (two * log).sqrt()
}

fn inv_sqrt(n: usize) -> FBig {
    big(1.0) / big_n(n).sqrt()
}

/// `γB·√(2·ln(2(L+1)/δ))·(2/√m + 1/√μ)`.
pub fn h2_oracle(gamma: f64, b: f64, l: usize, delta: f64, m: usize, mu: usize) -> f64 {
    let c = concentration(1.0, b, l, delta);
    to_f64(big(gamma) * c * (big(2.0) * inv_sqrt(m) + inv_sqrt(mu)))
}

/// `ρ_in + B·√(2·ln(2(L+2)/δ))·(2/√n + 2/√m + 1/√μ)`.
pub fn kappa_oracle(rho_in: f64, b: f64, l: usize, delta: f64, n: usize, m: usize, mu: usize) -> f64 {
    let c = concentration(2.0, b, l, delta);
    let sizes = big(2.0) * inv_sqrt(n) + big(2.0) * inv_sqrt(m) + inv_sqrt(mu);
    to_f64(big(rho_in) + c * sizes)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
