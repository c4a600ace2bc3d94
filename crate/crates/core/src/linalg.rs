//! Small dense helpers for nonnegative matrices.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix must be square, got {0}x{1}")]
    NotSquare(usize, usize),
    #[error("entry ({0},{1}) = {2} is negative or not finite")]
    BadEntry(usize, usize, f64),
}

const POWER_MAX_ITER: usize = 20_000;
const POWER_REL_GAP: f64 = 1e-13;

/// Strongly connected components of the directed graph with an edge `i -> j` whenever `adj(i, j)`.
///
/// Components come out in reverse topological order (Tarjan).
pub fn strongly_connected_components(n: usize, succ: &[Vec<usize>]) -> Vec<Vec<usize>> {
    struct State<'a> {
        succ: &'a [Vec<usize>],
        index: Vec<usize>,
        low: Vec<usize>,
        on_stack: Vec<bool>,
        stack: Vec<usize>,
        next: usize,
        out: Vec<Vec<usize>>,
    }
    const UNSEEN: usize = usize::MAX;
    let mut st = State {
        succ,
        index: vec![UNSEEN; n],
        low: vec![0; n],
        on_stack: vec![false; n],
        stack: Vec::new(),
        next: 0,
        out: Vec::new(),
    };
    // iterative DFS: frames hold (node, next successor position)
    for root in 0..n {
        if st.index[root] != UNSEEN {
            continue;
        }
        let mut frames: Vec<(usize, usize)> = vec![(root, 0)];
        st.index[root] = st.next;
        st.low[root] = st.next;
        st.next += 1;
        st.stack.push(root);
        st.on_stack[root] = true;
        while let Some(&(v, pos)) = frames.last() {
            if pos < st.succ[v].len() {
                let w = st.succ[v][pos];
                frames.last_mut().expect("frame").1 += 1;
                if st.index[w] == UNSEEN {
                    st.index[w] = st.next;
                    st.low[w] = st.next;
                    st.next += 1;
                    st.stack.push(w);
                    st.on_stack[w] = true;
                    frames.push((w, 0));
                } else if st.on_stack[w] {
                    st.low[v] = st.low[v].min(st.index[w]);
                }
            } else {
                frames.pop();
                if let Some(&(parent, _)) = frames.last() {
                    st.low[parent] = st.low[parent].min(st.low[v]);
                }
                if st.low[v] == st.index[v] {
                    let mut comp = Vec::new();
                    loop {
                        let w = st.stack.pop().expect("tarjan stack");
                        st.on_stack[w] = false;
                        comp.push(w);
                        if w == v {
                            break;
                        }
                    }
                    comp.sort_unstable();
                    st.out.push(comp);
                }
            }
        }
    }
    st.out
}

/// Successor lists of the support graph of `m`.
pub fn support_graph(m: &DMatrix<f64>) -> Vec<Vec<usize>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).filter(|&j| m[(i, j)] != 0.0).collect())
        .collect()
}

fn validate(m: &DMatrix<f64>) -> Result<(), LinalgError> {
    if m.nrows() != m.ncols() {
        return Err(LinalgError::NotSquare(m.nrows(), m.ncols()));
    }
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            let v = m[(i, j)];
            if !v.is_finite() || v < 0.0 {
                return Err(LinalgError::BadEntry(i, j, v));
            }
        }
    }
    Ok(())
}

/// Perron root of an irreducible nonnegative block.
///
/// Power iteration on `B + sigma I`, which is primitive for any `sigma > 0`,
/// bracketed by the Collatz-Wielandt bounds. Falls back to a dense eigenvalue
/// solve if the bracket has not closed after the iteration budget.
fn perron_root_irreducible(b: &DMatrix<f64>) -> f64 {
    let n = b.nrows();
    if n == 1 {
        return b[(0, 0)];
    }
    let row_sums: Vec<f64> = (0..n).map(|i| b.row(i).sum()).collect();
    let lo_rs = row_sums.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi_rs = row_sums.iter().cloned().fold(0.0, f64::max);
    if hi_rs == 0.0 {
        return 0.0;
    }
    if (hi_rs - lo_rs) <= POWER_REL_GAP * hi_rs {
        return hi_rs;
    }
    let sigma = 0.5 * (lo_rs + hi_rs);
    let mut x = DVector::from_element(n, 1.0);
    let mut lo = lo_rs;
    let mut hi = hi_rs;
    for _ in 0..POWER_MAX_ITER {
        let y = b * &x + &x * sigma;
        let mut rmin = f64::INFINITY;
        let mut rmax = 0.0f64;
        for i in 0..n {
            let r = y[i] / x[i];
            rmin = rmin.min(r);
            rmax = rmax.max(r);
        }
        lo = lo.max(rmin - sigma);
        hi = hi.min(rmax - sigma);
        if hi - lo <= POWER_REL_GAP * hi.abs().max(f64::MIN_POSITIVE) {
            return 0.5 * (lo + hi);
        }
        let norm = y.max();
        x = y / norm;
        if x.iter().any(|&v| v <= 0.0) {
            break;
        }
    }
    let eig = b.clone().complex_eigenvalues();
    let dense = eig.iter().map(|z| z.norm()).fold(0.0, f64::max);
    dense.clamp(lo, hi)
}

/// Spectral radius of a square nonnegative matrix.
///
/// The support graph is split into strongly connected components and the
/// Perron root of each irreducible diagonal block is found separately.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64, LinalgError> {
    validate(m)?;
    let n = m.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    let succ = support_graph(m);
    let mut best = 0.0f64;
    for comp in strongly_connected_components(n, &succ) {
        if comp.len() == 1 {
            best = best.max(m[(comp[0], comp[0])]);
            continue;
        }
        let b = DMatrix::from_fn(comp.len(), comp.len(), |i, j| m[(comp[i], comp[j])]);
        best = best.max(perron_root_irreducible(&b));
    }
    Ok(best)
}

/// Whether the support graph of `m` is strongly connected.
pub fn is_irreducible(m: &DMatrix<f64>) -> bool {
    let succ = support_graph(m);
    strongly_connected_components(m.nrows(), &succ).len() == 1
}

/// Infinity norm: maximum absolute row sum.
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}
