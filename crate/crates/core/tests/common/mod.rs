#![allow(dead_code)]

use nalgebra::DMatrix;

/// Golden-section maximization of a unimodal function on `[a, b]`.
pub fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

/// Log of the tilted mass at `atom` when `p` on `atoms` is tilted by `theta`,
/// written directly from the definition.
pub fn log_tilted_mass(atoms: &[f64], p: &[f64], theta: f64, atom: usize) -> f64 {
    let m = atoms.iter().map(|&a| theta * a).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = atoms.iter().zip(p).map(|(&a, &w)| w * (theta * a - m).exp()).sum();
    p[atom].ln() + theta * atoms[atom] - m - z.ln()
}

/// Grid-search maximum of the semiparametric log-likelihood for a model
/// with one free mean per group (identity link, saturated group effects).
/// The simplex over `{0, 1, 2}` is scanned at `step`; each group's tilt is
/// maximized by golden section.
pub fn grid_max_three_atoms(groups: &[Vec<usize>], step: f64) -> f64 {
    let atoms = [0.0, 1.0, 2.0];
    let k = (1.0 / step).round() as usize;
    let mut best = f64::NEG_INFINITY;
    for i in 1..k {
        for j in 1..(k - i) {
            let p = [i as f64 * step, j as f64 * step, (k - i - j) as f64 * step];
            let mut total = 0.0;
            for obs in groups {
                let ll = |t: f64| obs.iter().map(|&a| log_tilted_mass(&atoms, &p, t, a)).sum::<f64>();
                total += golden_max(ll, -30.0, 30.0, 1e-9).1;
            }
            best = best.max(total);
        }
    }
    best
}

/// Ordinary least squares through the normal equations.
pub fn ols(x: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
    let q = x.ncols();
    let mut a = vec![vec![0.0; q + 1]; q];
    for r in 0..q {
        for c in 0..q {
            a[r][c] = (0..x.nrows()).map(|i| x[(i, r)] * x[(i, c)]).sum();
        }
        a[r][q] = (0..x.nrows()).map(|i| x[(i, r)] * y[i]).sum();
    }
    // Gauss-Jordan with partial pivoting
    for col in 0..q {
        let piv = (col..q).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..q {
            if r != col {
                let m = a[r][col] / a[col][col];
                for c in col..=q {
                    a[r][c] -= m * a[col][c];
                }
            }
        }
    }
    (0..q).map(|r| a[r][q] / a[r][r]).collect()
}

/// Poisson pmf on `0..=max` with tail mass folded into nothing; `lambda`
/// should be small enough that the truncation is below f64 resolution.
pub fn poisson_pmf(lambda: f64, max: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(max + 1);
    let mut lp = -lambda;
    for k in 0..=max {
        if k > 0 {
            lp += lambda.ln() - (k as f64).ln();
        }
        out.push(lp.exp());
    }
    out
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}
