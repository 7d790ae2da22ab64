//! Structured Newton systems `(H_gen + F' D F + shift I) dz = r`.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{ConvexProgram, SparseRow};

/// Which program constraint an internal inequality row stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Kind {
    Row(usize),
    Lower(usize),
    Upper(usize),
}

/// All inequalities of a program as `F z <= f`.
#[derive(Debug, Clone)]
pub(crate) struct Constraints {
    pub rows: Vec<SparseRow>,
    pub rhs: Vec<f64>,
    pub kind: Vec<Kind>,
}

impl Constraints {
    pub fn new(p: &ConvexProgram) -> Self {
        let mut rows = p.rows.clone();
        let mut rhs = p.rhs.clone();
        let mut kind: Vec<Kind> = (0..p.rows.len()).map(Kind::Row).collect();
        for i in 0..p.n() {
            if p.lower[i].is_finite() {
                rows.push(SparseRow::from_pairs([(i, -1.0)]));
                rhs.push(-p.lower[i]);
                kind.push(Kind::Lower(i));
            }
        }
        for i in 0..p.n() {
            if p.upper[i].is_finite() {
                rows.push(SparseRow::from_pairs([(i, 1.0)]));
                rhs.push(p.upper[i]);
                kind.push(Kind::Upper(i));
            }
        }
        Constraints { rows, rhs, kind }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }
}

struct RowSplit {
    core: Vec<(usize, f64)>,
    sep: Option<(usize, f64)>,
}

struct AtomCore {
    weight: f64,
    core: Vec<(usize, f64)>,
}

pub(crate) struct NewtonSystem {
    n: usize,
    core: Vec<usize>,
    core_pos: Vec<usize>,
    sep: Vec<usize>,
    hess_core: Vec<(usize, usize, f64)>,
    hess_diag: Vec<f64>,
    rows: Vec<RowSplit>,
    /// Distinct core coefficient lists; rows sharing one are accumulated
    /// into a single rank-one update.
    patterns: Vec<Vec<(usize, f64)>>,
    pattern_of: Vec<usize>,
    /// For each separable variable (indexed like `sep`): rows coupling it to core variables, and rows touching only it.
    coupling: Vec<Vec<usize>>,
    pure: Vec<Vec<usize>>,
    atoms: Vec<AtomCore>,
    // factorization state
    d: Vec<f64>,
    sep_diag: Vec<f64>,
    chol: Option<Cholesky<f64, Dyn>>,
}

impl NewtonSystem {
    pub fn new(p: &ConvexProgram, cons: &Constraints) -> Self {
        let n = p.n();
        let hess = p.hessian_entries();
        let mut separable = vec![true; n];
        for &(i, j, _) in &hess {
            if i != j {
                separable[i] = false;
                separable[j] = false;
            }
        }
        for a in &p.atoms {
            for &i in &a.row.idx {
                separable[i] = false;
            }
        }
        for r in &cons.rows {
            let mut seen = false;
            for &i in &r.idx {
                if separable[i] {
                    if seen {
                        separable[i] = false;
                    }
                    seen = true;
                }
            }
        }
        let core: Vec<usize> = (0..n).filter(|&i| !separable[i]).collect();
        let sep: Vec<usize> = (0..n).filter(|&i| separable[i]).collect();
        let mut core_pos = vec![usize::MAX; n];
        for (k, &i) in core.iter().enumerate() {
            core_pos[i] = k;
        }
        let mut sep_pos = vec![usize::MAX; n];
        for (k, &i) in sep.iter().enumerate() {
            sep_pos[i] = k;
        }
        let mut hess_core = Vec::new();
        let mut hess_diag = vec![0.0; n];
        for &(i, j, v) in &hess {
            if i == j && separable[i] {
                hess_diag[i] += v;
            } else {
                hess_core.push((core_pos[i], core_pos[j], v));
            }
        }
        let mut coupling = vec![Vec::new(); sep.len()];
        let mut pure = vec![Vec::new(); sep.len()];
        let rows: Vec<RowSplit> = cons
            .rows
            .iter()
            .enumerate()
            .map(|(ri, r)| {
                let mut split = RowSplit { core: Vec::new(), sep: None };
                for (&i, &v) in r.idx.iter().zip(&r.val) {
                    if separable[i] {
                        split.sep = Some((sep_pos[i], v));
                    } else {
                        split.core.push((core_pos[i], v));
                    }
                }
                if let Some((k, _)) = split.sep {
                    if split.core.is_empty() {
                        pure[k].push(ri);
                    } else {
                        coupling[k].push(ri);
                    }
                }
                split
            })
            .collect();
        let mut lookup: HashMap<Vec<(usize, u64)>, usize> = HashMap::new();
        let mut patterns = Vec::new();
        let pattern_of = rows
            .iter()
            .map(|r| {
                let key: Vec<(usize, u64)> = r.core.iter().map(|&(a, v)| (a, v.to_bits())).collect();
                *lookup.entry(key).or_insert_with(|| {
                    patterns.push(r.core.clone());
                    patterns.len() - 1
                })
            })
            .collect();
        let atoms = p
            .atoms
            .iter()
            .map(|a| AtomCore {
                weight: a.weight,
                core: a.row.idx.iter().zip(&a.row.val).map(|(&i, &v)| (core_pos[i], v)).collect(),
            })
            .collect();
        NewtonSystem {
            n,
            core,
            core_pos,
            sep,
            hess_core,
            hess_diag,
            rows,
            patterns,
            pattern_of,
            coupling,
            pure,
            atoms,
            d: Vec::new(),
            sep_diag: Vec::new(),
            chol: None,
        }
    }

    #[cfg(test)]
    pub fn n_core(&self) -> usize {
        self.core.len()
    }

    /// `k += w v v'` on the upper triangle of the row-major `nc x nc` buffer.
    fn rank1(k: &mut [f64], nc: usize, w: f64, entries: &[(usize, f64)]) {
        if w == 0.0 {
            return;
        }
        for &(a, va) in entries {
            let wa = w * va;
            let row = &mut k[a * nc..(a + 1) * nc];
            for &(b, vb) in entries {
                if b >= a {
                    row[b] += wa * vb;
                }
            }
        }
    }

    /// Assembles and factors the reduced matrix for row weights `d` and the
    /// atoms flagged in `atom_active`.
    pub fn factor(&mut self, d: &[f64], atom_active: &[bool], shift: f64) -> bool {
        let nc = self.core.len();
        let mut k = vec![0.0; nc * nc];
        for &(a, b, v) in &self.hess_core {
            k[a.min(b) * nc + a.max(b)] += v;
        }
        for (atom, &on) in self.atoms.iter().zip(atom_active) {
            if on {
                Self::rank1(&mut k, nc, 2.0 * atom.weight, &atom.core);
            }
        }
        let mut acc = vec![0.0; self.patterns.len()];
        for (ri, row) in self.rows.iter().enumerate() {
            if row.sep.is_none() {
                acc[self.pattern_of[ri]] += d[ri];
            }
        }
        let mut sep_diag = vec![0.0; self.sep.len()];
        for (s, &var) in self.sep.iter().enumerate() {
            let mut e = self.hess_diag[var] + shift;
            for &ri in &self.pure[s] {
                let g = self.rows[ri].sep.unwrap().1;
                e += d[ri] * g * g;
            }
            match self.coupling[s].as_slice() {
                [] => sep_diag[s] = e,
                &[ri] => {
                    let row = &self.rows[ri];
                    let g = row.sep.unwrap().1;
                    let dg = d[ri] * g * g;
                    sep_diag[s] = e + dg;
                    // D - D^2 g^2 / (D g^2 + e) written without cancellation
                    if sep_diag[s] > 0.0 {
                        acc[self.pattern_of[ri]] += d[ri] * e / sep_diag[s];
                    }
                }
                rows => {
                    let mut diag = e;
                    let mut kj = vec![0.0; nc];
                    for &ri in rows {
                        let row = &self.rows[ri];
                        let g = row.sep.unwrap().1;
                        diag += d[ri] * g * g;
                        Self::rank1(&mut k, nc, d[ri], &row.core);
                        for &(a, v) in &row.core {
                            kj[a] += d[ri] * g * v;
                        }
                    }
                    sep_diag[s] = diag;
                    if diag > 0.0 {
                        for a in 0..nc {
                            for b in a..nc {
                                k[a * nc + b] -= kj[a] * kj[b] / diag;
                            }
                        }
                    }
                }
            }
        }
        for (w, pat) in acc.iter().zip(&self.patterns) {
            Self::rank1(&mut k, nc, *w, pat);
        }
        let k = DMatrix::from_fn(nc, nc, |a, b| if a <= b { k[a * nc + b] } else { k[b * nc + a] } + if a == b { shift } else { 0.0 });
        self.d = d.to_vec();
        self.sep_diag = sep_diag;
        let scale = (0..nc).map(|i| k[(i, i)].abs()).fold(1.0, f64::max);
        let mut extra = 0.0;
        for _ in 0..8 {
            let mut m = k.clone();
            for i in 0..nc {
                m[(i, i)] += extra;
            }
            if let Some(c) = Cholesky::new(m) {
                self.chol = Some(c);
                return true;
            }
            extra = if extra == 0.0 { 1e-12 * scale } else { extra * 100.0 };
        }
        self.chol = None;
        false
    }

    /// Separable-variable coupling vector `k_j` applied as `sum_a k_j[a] x[a]`
    /// or accumulated into `out` with factor `alpha`.
    fn coupling_dot(&self, s: usize, x: &DVector<f64>) -> f64 {
        self.coupling[s]
            .iter()
            .map(|&ri| {
                let row = &self.rows[ri];
                let g = row.sep.unwrap().1;
                self.d[ri] * g * row.core.iter().map(|&(a, v)| v * x[a]).sum::<f64>()
            })
            .sum()
    }

    fn coupling_axpy(&self, s: usize, alpha: f64, out: &mut DVector<f64>) {
        for &ri in &self.coupling[s] {
            let row = &self.rows[ri];
            let g = row.sep.unwrap().1;
            let c = alpha * self.d[ri] * g;
            for &(a, v) in &row.core {
                out[a] += c * v;
            }
        }
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let chol = self.chol.as_ref().expect("factor before solve");
        let nc = self.core.len();
        let mut rc = DVector::from_fn(nc, |a, _| rhs[self.core[a]]);
        for (s, &var) in self.sep.iter().enumerate() {
            if self.sep_diag[s] > 0.0 {
                self.coupling_axpy(s, -rhs[var] / self.sep_diag[s], &mut rc);
            }
        }
        let xc = chol.solve(&rc);
        let mut dz = vec![0.0; self.n];
        for (a, &var) in self.core.iter().enumerate() {
            dz[var] = xc[a];
        }
        for (s, &var) in self.sep.iter().enumerate() {
            dz[var] = if self.sep_diag[s] > 0.0 { (rhs[var] - self.coupling_dot(s, &xc)) / self.sep_diag[s] } else { 0.0 };
        }
        let _ = &self.core_pos;
        dz
    }
}
