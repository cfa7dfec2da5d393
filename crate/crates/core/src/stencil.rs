//! Small interpolation helpers shared by the grid and the maps.

/// Index `i` of the interval `[c[i], c[i+1]]` holding `x`, clamped to `0..=n-2`.
/// `coords` must be strictly increasing with at least two entries.
pub(crate) fn locate_interval(coords: &[f64], x: f64) -> usize {
    let n = coords.len();
    if x <= coords[0] {
        return 0;
    }
    if x >= coords[n - 1] {
        return n - 2;
    }
    // partition_point: first index with c > x
    coords.partition_point(|&c| c <= x).saturating_sub(1).min(n - 2)
}

/// Same as [`locate_interval`] but starts from a hint, cheap for sweeps.
pub(crate) fn hunt_interval(coords: &[f64], x: f64, hint: usize) -> usize {
    let n = coords.len();
    let mut i = hint.min(n - 2);
    if x >= coords[i] && x <= coords[i + 1] {
        return i;
    }
    if x > coords[i + 1] && i + 2 < n && x <= coords[i + 2] {
        i += 1;
        return i;
    }
    if i > 0 && x < coords[i] && x >= coords[i - 1] {
        return i - 1;
    }
    locate_interval(coords, x)
}

/// First node of a `degree + 1` point stencil around interval `cell` of an
/// `n`-node line. Degree is reduced when the line is too short.
pub(crate) fn stencil(cell: usize, degree: usize, n: usize) -> (usize, usize) {
    let degree = degree.min(n - 1);
    let back = (degree.saturating_sub(1) / 2) as isize;
    let start = (cell as isize - back).clamp(0, (n - 1 - degree) as isize) as usize;
    (start, degree)
}

/// Lagrange basis weights of `nodes` evaluated at `x`.
pub(crate) fn lagrange_weights(nodes: &[f64], x: f64, out: &mut [f64]) {
    let m = nodes.len();
    for j in 0..m {
        let mut w = 1.0;
        for k in 0..m {
            if k != j {
                w *= (x - nodes[k]) / (nodes[j] - nodes[k]);
            }
        }
        out[j] = w;
    }
}

/// Weights for evaluating a function sampled on the strictly increasing
/// `coords` at `x` with a degree-`degree` local polynomial. Returns the first
/// stencil index and the number of weights written. `x` is clamped to the line.
pub(crate) fn line_weights(coords: &[f64], x: f64, degree: usize, hint: usize, out: &mut [f64; 4]) -> (usize, usize) {
    let n = coords.len();
    let x = x.clamp(coords[0], coords[n - 1]);
    let cell = hunt_interval(coords, x, hint);
    let (start, degree) = stencil(cell, degree, n);
    if degree == 1 {
        let t = (x - coords[start]) / (coords[start + 1] - coords[start]);
        out[0] = 1.0 - t;
        out[1] = t;
        return (start, 2);
    }
    lagrange_weights(&coords[start..=start + degree], x, &mut out[..=degree]);
    (start, degree + 1)
}

/// Same as [`line_weights`] for nodes at integer positions `0..n` (index space).
pub(crate) fn index_weights(n: usize, s: f64, degree: usize, out: &mut [f64; 4]) -> (usize, usize) {
    let s = s.clamp(0.0, (n - 1) as f64);
    let cell = (s.floor() as usize).min(n - 2);
    let (start, degree) = stencil(cell, degree, n);
    if degree == 1 {
        let t = s - start as f64;
        out[0] = 1.0 - t;
        out[1] = t;
        return (start, 2);
    }
    let mut nodes = [0.0; 4];
    for (k, node) in nodes.iter_mut().enumerate().take(degree + 1) {
        *node = (start + k) as f64;
    }
    lagrange_weights(&nodes[..=degree], s, &mut out[..=degree]);
    (start, degree + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_lookup() {
        let c = [0.0, 1.0, 2.0, 4.0];
        assert_eq!(locate_interval(&c, -1.0), 0);
        assert_eq!(locate_interval(&c, 0.5), 0);
        assert_eq!(locate_interval(&c, 1.0), 1);
        assert_eq!(locate_interval(&c, 3.0), 2);
        assert_eq!(locate_interval(&c, 9.0), 2);
        for hint in 0..4 {
            assert_eq!(hunt_interval(&c, 3.0, hint), 2);
            assert_eq!(hunt_interval(&c, 0.2, hint), 0);
        }
    }

    #[test]
    fn cubic_weights_reproduce_cubics() {
        let c = [0.0, 0.3, 0.7, 1.2, 2.0, 2.1];
        let f = |x: f64| 1.0 - 2.0 * x + 0.5 * x * x - x * x * x;
        let mut w = [0.0; 4];
        for &x in &[0.0, 0.1, 0.5, 1.0, 1.9, 2.1] {
            let (s, m) = line_weights(&c, x, 3, 0, &mut w);
            let v: f64 = (0..m).map(|k| w[k] * f(c[s + k])).sum();
            assert!((v - f(x)).abs() < 1e-12, "{x}");
        }
    }

    #[test]
    fn index_weights_are_exact_at_nodes() {
        let mut w = [0.0; 4];
        for degree in [1, 3] {
            for i in 0..7 {
                let (s, m) = index_weights(7, i as f64, degree, &mut w);
                for k in 0..m {
                    let expect = if s + k == i { 1.0 } else { 0.0 };
                    assert_eq!(w[k], expect);
                }
            }
        }
    }
}
