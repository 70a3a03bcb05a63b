//! Plain-text solution files.
//!
//! ```text
//! n_d N m n_fp
//! beta_0 beta_1 ... beta_{n_beta-1}
//! tau U_1 ... U_{n_d}        (N*m + 1 rows, every fine point)
//! ```
//!
//! All reals use 17 significant digits so files round-trip bit-identically.
//! Lines starting with `#` are metadata and are skipped on read.

use super::{CollocationError, CollocationSolution, Mesh};

pub fn write_solution(sol: &CollocationSolution, n_fp: usize) -> String {
    let n = sol.mesh.n_intervals();
    let m = sol.mesh.m;
    let mut s = format!("{} {} {} {}\n", sol.n_dim, n, m, n_fp);
    let beta_str: Vec<String> = sol.beta.iter().map(|b| format!("{:.16e}", b)).collect();
    s.push_str(&beta_str.join(" "));
    s.push('\n');
    let fine = sol.mesh.fine_taus();
    for (k, tau) in fine.iter().enumerate() {
        s.push_str(&format!("{:.16e}", tau));
        for v in sol.point(k) {
            s.push_str(&format!(" {:.16e}", v));
        }
        s.push('\n');
    }
    s
}

pub fn read_solution(text: &str) -> Result<(CollocationSolution, usize), CollocationError> {
    let mut lines = text.lines().filter(|l| !l.trim_start().starts_with('#') && !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| CollocationError::Format("empty file".into()))?;
    let hdr: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| CollocationError::Format(format!("bad header: {header}"))))
        .collect::<Result<_, _>>()?;
    if hdr.len() != 4 {
        return Err(CollocationError::Format("header must be `n_d N m n_fp`".into()));
    }
    let (n_dim, n, m, n_fp) = (hdr[0], hdr[1], hdr[2], hdr[3]);
    let beta_line = lines.next().ok_or_else(|| CollocationError::Format("missing beta".into()))?;
    let beta: Vec<f64> = beta_line
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| CollocationError::Format(format!("bad beta: {t}"))))
        .collect::<Result<_, _>>()?;

    let n_pts = n * m + 1;
    let mut fine_taus = Vec::with_capacity(n_pts);
    let mut values = Vec::with_capacity(n_pts * n_dim);
    for _ in 0..n_pts {
        let line = lines.next().ok_or_else(|| CollocationError::Format("truncated rows".into()))?;
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| CollocationError::Format(format!("bad value: {t}"))))
            .collect::<Result<_, _>>()?;
        if row.len() != n_dim + 1 {
            return Err(CollocationError::Format(format!(
                "row has {} fields, expected {}",
                row.len(),
                n_dim + 1
            )));
        }
        fine_taus.push(row[0]);
        values.extend_from_slice(&row[1..]);
    }
    let taus: Vec<f64> = (0..=n).map(|i| fine_taus[i * m]).collect();
    let mesh = Mesh { taus, m };
    mesh.validate()?;
    Ok((CollocationSolution { mesh, n_dim, values, beta }, n_fp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn roundtrip_simple() {
        let mesh = Mesh { taus: vec![0.0, 0.3, 0.55, 1.0], m: 3 };
        let sol = CollocationSolution::from_fn(mesh, 2, vec![1.5, -0.25, 3.0], |tau, out| {
            out[0] = tau * tau - 0.7;
            out[1] = (3.1 * tau).sin();
        });
        let text = write_solution(&sol, 2);
        let (back, n_fp) = read_solution(&text).unwrap();
        assert_eq!(n_fp, 2);
        assert_eq!(back.n_dim, sol.n_dim);
        assert_eq!(back.mesh.m, sol.mesh.m);
        assert_eq!(back.values, sol.values, "values must round-trip bit-identically");
        assert_eq!(back.beta, sol.beta);
        assert_eq!(back.mesh.taus, sol.mesh.taus);
    }

    #[test]
    fn metadata_lines_skipped() {
        let mesh = Mesh::uniform(2, 2);
        let sol = CollocationSolution::from_fn(mesh, 1, vec![0.5], |tau, out| out[0] = tau);
        let mut text = write_solution(&sol, 1);
        text = format!("# blocks u=1:1\n{text}");
        let (back, _) = read_solution(&text).unwrap();
        assert_eq!(back.values, sol.values);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn roundtrip_random_values(
            vals in proptest::collection::vec(-1e12f64..1e12, 9 * 2),
            beta in proptest::collection::vec(-1e6f64..1e6, 3),
        ) {
            // N=4, m=2, n_dim=2 -> 9 points
            let mesh = Mesh::uniform(4, 2);
            let sol = CollocationSolution { mesh, n_dim: 2, values: vals, beta };
            let text = write_solution(&sol, 1);
            let (back, _) = read_solution(&text).unwrap();
            prop_assert_eq!(back.values, sol.values);
            prop_assert_eq!(back.beta, sol.beta);
        }
    }
}
