//! Block elimination of the penalized least-squares system
//!
//! ```text
//! [ ΛᵀZᵀZΛ + I   ΛᵀZᵀX ] [u]   [ΛᵀZᵀy]
//! [ XᵀZΛ         XᵀX   ] [β] = [Xᵀy ]
//! ```
//!
//! Units whose per-group diagonal blocks stay uncoupled are eliminated group
//! by group (the pair unit first, then the larger of participants and
//! stimuli); the remaining unit and `X` form a dense tail factored last. The
//! elimination order and all θ-free cross products are computed once.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::covariance::CovStructure;
use crate::design::DesignMatrices;
use crate::formula::UnitKind;

/// Per-group data of a unit eliminated blockwise.
#[derive(Debug, Clone)]
struct EGroup {
    /// Σ z zᵀ over the group's rows.
    gram: DMatrix<f64>,
    /// Σ z y.
    zy: DVector<f64>,
    /// Tail columns touched by this group: whole tail-unit groups, then X.
    tail_idx: Vec<usize>,
    /// `tail_idx` as contiguous runs.
    runs: Vec<Run>,
    /// Σ z [z_tail, x]ᵀ restricted to `tail_idx`.
    tail_cross: DMatrix<f64>,
    /// Neighbouring group of the second eliminated unit with Σ z₁ z₂ᵀ and
    /// the positions of `tail_idx` within that group's `tail_idx`, as runs.
    next: Option<(usize, DMatrix<f64>, Vec<Run>)>,
}

/// `len` consecutive entries starting at `pos` in a local index list, mapped
/// to consecutive targets starting at `target`.
#[derive(Debug, Clone, Copy)]
struct Run {
    pos: usize,
    target: usize,
    len: usize,
}

fn runs(idx: &[usize]) -> Vec<Run> {
    let mut out: Vec<Run> = Vec::new();
    for (pos, &t) in idx.iter().enumerate() {
        match out.last_mut() {
            Some(r) if r.target + r.len == t => r.len += 1,
            _ => out.push(Run { pos, target: t, len: 1 }),
        }
    }
    out
}

#[derive(Debug, Clone)]
struct EUnit {
    unit_idx: usize,
    dim: usize,
    groups: Vec<EGroup>,
}

/// θ-independent part of the problem.
#[derive(Debug, Clone)]
pub(crate) struct Plan {
    n: usize,
    p: usize,
    elim: Vec<EUnit>,
    /// Dense tail unit (index into design units), its dim and group count.
    tail_unit: Option<(usize, usize, usize)>,
    tail_gram: Vec<DMatrix<f64>>,
    tail_zx: Vec<DMatrix<f64>>,
    tail_zy: Vec<DVector<f64>>,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
}

/// Result of one factorization at a given θ.
#[derive(Debug, Clone)]
pub(crate) struct Solved {
    /// log det(ΛᵀZᵀZΛ + I).
    pub logdet_l: f64,
    /// log det of the β block of the Schur complement.
    pub logdet_rx: f64,
    /// Penalized residual sum of squares.
    pub pwrss: f64,
    pub beta: DVector<f64>,
    /// Spherical effects per design unit, group-major.
    pub u: Vec<DVector<f64>>,
    /// Lower Cholesky factor of the β block, `L_X L_Xᵀ = XᵀV⁻¹X` (σ-free).
    pub lx: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NotPositiveDefinite;

impl Plan {
    pub fn new(d: &DesignMatrices) -> Plan {
        let n = d.n_obs();
        let p = d.p();
        let find = |k: UnitKind| d.units.iter().position(|u| u.unit == k);
        let (ps, pu, su) = (
            find(UnitKind::ParticipantStimulus),
            find(UnitKind::Participant),
            find(UnitKind::Stimulus),
        );
        let q = |i: usize| d.units[i].q();
        let larger = |a: usize, b: usize| if q(a) >= q(b) { (a, b) } else { (b, a) };
        let (order, tail): (Vec<usize>, Option<usize>) = match (ps, pu, su) {
            (Some(x), Some(a), Some(b)) => {
                let (big, small) = larger(a, b);
                (vec![x, big], Some(small))
            }
            (Some(x), Some(a), None) | (Some(x), None, Some(a)) => (vec![x, a], None),
            (Some(x), None, None) => (vec![x], None),
            (None, Some(a), Some(b)) => {
                let (big, small) = larger(a, b);
                (vec![big], Some(small))
            }
            (None, Some(a), None) | (None, None, Some(a)) => (vec![a], None),
            (None, None, None) => (vec![], None),
        };

        let tail_unit = tail.map(|t| (t, d.units[t].dim, d.units[t].n_groups));
        let tail_q = tail_unit.map_or(0, |(_, dt, gt)| dt * gt);
        let y = &d.y;
        let x = &d.x;

        // Tail columns touched by each group of each eliminated unit.
        let mut elim: Vec<EUnit> = Vec::new();
        for &ui in &order {
            let u = &d.units[ui];
            let mut touched: Vec<Vec<usize>> = vec![Vec::new(); u.n_groups];
            if let Some((t, _, _)) = tail_unit {
                for i in 0..n {
                    touched[u.group[i]].push(d.units[t].group[i]);
                }
            }
            let groups = touched
                .into_iter()
                .map(|mut tg| {
                    tg.sort_unstable();
                    tg.dedup();
                    let dt = tail_unit.map_or(0, |(_, dt, _)| dt);
                    let mut idx: Vec<usize> =
                        tg.iter().flat_map(|&g| (g * dt)..(g * dt + dt)).collect();
                    idx.extend(tail_q..tail_q + p);
                    EGroup {
                        gram: DMatrix::zeros(u.dim, u.dim),
                        zy: DVector::zeros(u.dim),
                        runs: runs(&idx),
                        tail_cross: DMatrix::zeros(u.dim, idx.len()),
                        tail_idx: idx,
                        next: None,
                    }
                })
                .collect();
            elim.push(EUnit { unit_idx: ui, dim: u.dim, groups });
        }

        // Link groups of the first eliminated unit to the second one.
        if elim.len() == 2 {
            let (u1, u2) = (&d.units[elim[0].unit_idx], &d.units[elim[1].unit_idx]);
            let mut link = vec![usize::MAX; u1.n_groups];
            for i in 0..n {
                link[u1.group[i]] = u2.group[i];
            }
            let d2 = u2.dim;
            for g in 0..u1.n_groups {
                let g2 = link[g];
                if g2 == usize::MAX {
                    continue;
                }
                let pos_of = &elim[1].groups[g2].tail_idx;
                let scatter: Vec<usize> = elim[0].groups[g]
                    .tail_idx
                    .iter()
                    .map(|c| pos_of.binary_search(c).expect("tail columns nest"))
                    .collect();
                let d1 = elim[0].dim;
                elim[0].groups[g].next = Some((g2, DMatrix::zeros(d1, d2), runs(&scatter)));
            }
        }

        // Accumulate cross products row by row.
        let (dt, gt) = tail_unit.map_or((0, 0), |(_, dt, gt)| (dt, gt));
        let mut tail_gram = vec![DMatrix::zeros(dt, dt); gt];
        let mut tail_zx = vec![DMatrix::zeros(dt, p); gt];
        let mut tail_zy = vec![DVector::zeros(dt); gt];
        let xtx = x.transpose() * x;
        let xty = x.transpose() * y;
        for i in 0..n {
            let xi = x.row(i);
            let tail_row = tail_unit.map(|(t, _, _)| (d.units[t].group[i], d.units[t].values.row(i)));
            if let Some((tg, zt)) = &tail_row {
                let zt = zt.transpose();
                tail_gram[*tg] += &zt * zt.transpose();
                tail_zx[*tg] += &zt * xi;
                tail_zy[*tg] += &zt * y[i];
            }
            for k in 0..elim.len() {
                let u = &d.units[elim[k].unit_idx];
                let g = u.group[i];
                let z = u.values.row(i).transpose();
                let next_z = if k == 0 && elim.len() == 2 {
                    Some(d.units[elim[1].unit_idx].values.row(i).transpose())
                } else {
                    None
                };
                let eg = &mut elim[k].groups[g];
                eg.gram += &z * z.transpose();
                eg.zy += &z * y[i];
                let ncols = eg.tail_idx.len();
                if let Some((tg, zt)) = &tail_row {
                    let start = eg
                        .tail_idx
                        .binary_search(&(tg * dt))
                        .expect("row's tail group is touched");
                    for (c, v) in zt.iter().enumerate() {
                        for r in 0..z.len() {
                            eg.tail_cross[(r, start + c)] += z[r] * v;
                        }
                    }
                }
                let xs = ncols - p;
                for c in 0..p {
                    for r in 0..z.len() {
                        eg.tail_cross[(r, xs + c)] += z[r] * xi[c];
                    }
                }
                if let (Some(nz), Some((_, cross, _))) = (next_z, eg.next.as_mut()) {
                    *cross += &z * nz.transpose();
                }
            }
        }

        Plan { n, p, elim, tail_unit, tail_gram, tail_zx, tail_zy, xtx, xty }
    }

    /// Factors and solves the system at θ. Templates are indexed like the
    /// design units.
    pub fn solve(
        &self,
        d: &DesignMatrices,
        templates: &[DMatrix<f64>],
    ) -> Result<Solved, NotPositiveDefinite> {
        let p = self.p;
        let (dt, gt) = self.tail_unit.map_or((0, 0), |(_, dt, gt)| (dt, gt));
        let tq = dt * gt;
        let nr = tq + p;
        let tt = self.tail_unit.map(|(t, _, _)| &templates[t]);

        // Dense tail system.
        let mut r = DMatrix::zeros(nr, nr);
        let mut rhs = DVector::zeros(nr);
        if let Some(tt) = tt {
            for g in 0..gt {
                let o = g * dt;
                let a = tt.transpose() * &self.tail_gram[g] * tt + DMatrix::identity(dt, dt);
                r.view_mut((o, o), (dt, dt)).copy_from(&a);
                let c = tt.transpose() * &self.tail_zx[g];
                r.view_mut((o, tq), (dt, p)).copy_from(&c);
                r.view_mut((tq, o), (p, dt)).copy_from(&c.transpose());
                rhs.rows_mut(o, dt).copy_from(&(tt.transpose() * &self.tail_zy[g]));
            }
        }
        r.view_mut((tq, tq), (p, p)).copy_from(&self.xtx);
        rhs.rows_mut(tq, p).copy_from(&self.xty);

        // Right-multiplies the tail-unit columns of a cross block by T_tail.
        let scale_tail = |m: &mut DMatrix<f64>, idx: &[usize]| {
            if let Some(tt) = tt {
                let mut k = 0;
                while k < idx.len() && idx[k] < tq {
                    let seg = m.columns(k, dt) * tt;
                    m.columns_mut(k, dt).copy_from(&seg);
                    k += dt;
                }
            }
        };

        let mut logdet_l = 0.0;
        // Second eliminated unit: blocks are assembled up front and updated
        // while the first unit is eliminated.
        struct Pending {
            diag: DMatrix<f64>,
            cross: DMatrix<f64>,
            rhs: DVector<f64>,
        }
        let mut pending: Vec<Option<Pending>> = Vec::new();
        if let Some(e2) = self.elim.get(1) {
            let t2 = &templates[e2.unit_idx];
            for g in &e2.groups {
                let mut cross = t2.transpose() * &g.tail_cross;
                scale_tail(&mut cross, &g.tail_idx);
                pending.push(Some(Pending {
                    diag: t2.transpose() * &g.gram * t2 + DMatrix::identity(e2.dim, e2.dim),
                    cross,
                    rhs: t2.transpose() * &g.zy,
                }));
            }
        }

        // Stored factors for back substitution: (L, W_tail, w_y, W_next).
        type Stored = (Cholesky<f64, Dyn>, DMatrix<f64>, DVector<f64>, Option<DMatrix<f64>>);
        let mut stored: Vec<Vec<Stored>> = Vec::with_capacity(self.elim.len());

        for (k, e) in self.elim.iter().enumerate() {
            let t = &templates[e.unit_idx];
            let mut st = Vec::with_capacity(e.groups.len());
            for (gi, g) in e.groups.iter().enumerate() {
                let (diag, mut cross, zy) = if k == 0 {
                    let mut c = t.transpose() * &g.tail_cross;
                    scale_tail(&mut c, &g.tail_idx);
                    (
                        t.transpose() * &g.gram * t + DMatrix::identity(e.dim, e.dim),
                        c,
                        t.transpose() * &g.zy,
                    )
                } else {
                    let pd = pending[gi].take().expect("each group eliminated once");
                    (pd.diag, pd.cross, pd.rhs)
                };
                let chol = Cholesky::new(diag).ok_or(NotPositiveDefinite)?;
                logdet_l += 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                let lmat = chol.l();
                lmat.solve_lower_triangular_mut(&mut cross);
                let mut wy = zy;
                lmat.solve_lower_triangular_mut(&mut wy);

                // Schur update of the lower triangle of the dense tail.
                let ct = cross.transpose();
                for ra in &g.runs {
                    let ca = ct.rows(ra.pos, ra.len);
                    for rb in g.runs.iter().filter(|rb| rb.target <= ra.target) {
                        r.view_mut((ra.target, rb.target), (ra.len, rb.len)).gemm(
                            -1.0,
                            &ca,
                            &cross.columns(rb.pos, rb.len),
                            1.0,
                        );
                    }
                    rhs.rows_mut(ra.target, ra.len).gemv(-1.0, &ca, &wy, 1.0);
                }

                let mut wnext = None;
                if let Some((g2, c12, scatter)) = &g.next {
                    let t2 = &templates[self.elim[1].unit_idx];
                    let mut w2 = t.transpose() * c12 * t2;
                    lmat.solve_lower_triangular_mut(&mut w2);
                    let pd = pending[*g2].as_mut().expect("second unit not yet eliminated");
                    pd.diag -= w2.transpose() * &w2;
                    let w2t = w2.transpose();
                    for run in scatter {
                        pd.cross.columns_mut(run.target, run.len).gemm(
                            -1.0,
                            &w2t,
                            &cross.columns(run.pos, run.len),
                            1.0,
                        );
                    }
                    pd.rhs -= w2.transpose() * &wy;
                    wnext = Some(w2);
                }
                st.push((chol, cross, wy, wnext));
            }
            stored.push(st);
        }

        // Dense tail: symmetrize from the lower triangle and factor.
        for i in 0..nr {
            for j in 0..i {
                r[(j, i)] = r[(i, j)];
            }
        }
        let rc = Cholesky::new(r).ok_or(NotPositiveDefinite)?;
        let lr = rc.l();
        for i in 0..tq {
            logdet_l += 2.0 * lr[(i, i)].ln();
        }
        let mut logdet_rx = 0.0;
        for i in tq..nr {
            logdet_rx += 2.0 * lr[(i, i)].ln();
        }
        let xr = rc.solve(&rhs);
        let lx = lr.view((tq, tq), (p, p)).into_owned();

        // Back substitution, last eliminated unit first.
        let mut u: Vec<DVector<f64>> = templates.iter().map(|_| DVector::zeros(0)).collect();
        if let Some((t, _, _)) = self.tail_unit {
            u[t] = xr.rows(0, tq).into_owned();
        }
        for k in (0..self.elim.len()).rev() {
            let e = &self.elim[k];
            let mut uk = DVector::zeros(e.dim * e.groups.len());
            for (gi, g) in e.groups.iter().enumerate() {
                let (chol, w_tail, wy, wnext) = &stored[k][gi];
                let mut v = wy.clone();
                let xs = DVector::from_iterator(g.tail_idx.len(), g.tail_idx.iter().map(|&c| xr[c]));
                v -= w_tail * xs;
                if let (Some(w2), Some((g2, _, _))) = (wnext, &g.next) {
                    let d2 = self.elim[1].dim;
                    v -= w2 * u[self.elim[1].unit_idx].rows(g2 * d2, d2);
                }
                chol.l_dirty().tr_solve_lower_triangular_mut(&mut v);
                uk.rows_mut(gi * e.dim, e.dim).copy_from(&v);
            }
            u[e.unit_idx] = uk;
        }
        let beta = xr.rows(tq, p).into_owned();

        // Penalized residual sum of squares, computed directly.
        let mut fitted = &d.x * &beta;
        for (ui, ud) in d.units.iter().enumerate() {
            let t = &templates[ui];
            let b: Vec<DVector<f64>> = (0..ud.n_groups)
                .map(|g| t * u[ui].rows(g * ud.dim, ud.dim))
                .collect();
            for i in 0..self.n {
                fitted[i] += ud.values.row(i).transpose().dot(&b[ud.group[i]]);
            }
        }
        let rss = (&d.y - fitted).norm_squared();
        let pen: f64 = u.iter().map(|v| v.norm_squared()).sum();

        Ok(Solved { logdet_l, logdet_rx, pwrss: rss + pen, beta, u, lx })
    }
}

/// Templates for every design unit, matched by unit kind.
pub(crate) fn templates(
    structure: &CovStructure,
    d: &DesignMatrices,
    theta: &[f64],
) -> Vec<DMatrix<f64>> {
    d.units
        .iter()
        .map(|ud| {
            let k = structure.units.iter().position(|u| u.unit == ud.unit).expect("unit in structure");
            structure.template(k, theta)
        })
        .collect()
}
