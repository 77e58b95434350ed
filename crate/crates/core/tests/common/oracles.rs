//! Straight-line reference implementations shared by the aggregation tests.

pub fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Exponential inverse-agreement weights, written out term by term.
pub fn eicw_transcribed(y: &[Vec<f64>]) -> Vec<f64> {
    let n = y.len();
    let k = y[0].len();
    let mut mean = vec![0.0; k];
    for row in y {
        for c in 0..k {
            mean[c] += row[c];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut e = Vec::with_capacity(n);
    for row in y {
        let mut ab = 0.0;
        let mut aa = 0.0;
        let mut bb = 0.0;
        for c in 0..k {
            ab += row[c] * mean[c];
            aa += row[c] * row[c];
            bb += mean[c] * mean[c];
        }
        let coeff = 2.0 * ab / (aa + bb);
        e.push((1.0 / coeff).exp());
    }
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Per-class exponential weights across towers, written out term by term.
pub fn em_transcribed(y: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = y.len();
    let k = y[0].len();
    let mut w = vec![vec![0.0; k]; n];
    for c in 0..k {
        let mut z = 0.0;
        for row in y {
            z += row[c].exp();
        }
        for i in 0..n {
            w[i][c] = y[i][c].exp() / z;
        }
    }
    w
}

/// All probability vectors of length `k` with entries on the 0.25 lattice.
pub fn lattice(k: usize) -> Vec<Vec<f64>> {
    fn go(k: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
        if cur.len() == k - 1 {
            let mut v: Vec<f64> = cur.iter().map(|&q| q as f64 * 0.25).collect();
            v.push(left as f64 * 0.25);
            out.push(v);
            return;
        }
        for q in 0..=left {
            cur.push(q);
            go(k, left - q, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(k, 4, &mut Vec::new(), &mut out);
    out
}

pub fn tuples(points: &[Vec<f64>], n: usize) -> Vec<Vec<Vec<f64>>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for rest in tuples(points, n - 1) {
        for p in points {
            let mut t = rest.clone();
            t.push(p.clone());
            out.push(t);
        }
    }
    out
}
