//! Quasi-F tests from the classical sums-of-squares decomposition of a
//! balanced crossed design.
//!
//! Every fixed term and every random term defines a partition of the
//! observations. Processing partitions from coarse to fine, the stratum
//! component of a vector is its cell means minus the components of all
//! coarser partitions it refines; on a balanced design these are the
//! orthogonal projections onto the ANOVA strata. Expected mean squares are
//! `σ²_ε + Σ_c k_jc·σ²_c` with `k_jc = ‖P_j Z_c‖²_F / df_j`, where `Z_c`
//! uses the same orthonormal coding as the gANOVA fit.

use std::collections::HashMap;

use nalgebra::DMatrix;

use super::{f_upper_tail, InferenceError, TestResult};
use crate::covariance::{realize, CovFamily, FamilyTag};
use crate::data::Dataset;
use crate::design::build_design;
use crate::formula::{ModelSpec, UnitKind};
use crate::reml::FitError;

struct Stratum {
    label: String,
    random: bool,
    cell: Vec<usize>,
    n_cells: usize,
    cell_size: f64,
    /// Earlier strata this partition refines.
    parents: Vec<usize>,
    df: usize,
}

struct Decomposition {
    strata: Vec<Stratum>,
    n: usize,
    residual_df: usize,
}

impl Decomposition {
    fn new(data: &Dataset, parts: Vec<(String, bool, Vec<String>)>) -> Result<Self, InferenceError> {
        let n = data.n_obs();
        let mut raw: Vec<Stratum> = Vec::new();
        for (label, random, vars) in parts {
            let codes: Vec<&[usize]> =
                vars.iter().map(|v| data.categorical(v).map(|c| c.codes.as_slice())).collect::<Result<_, _>>()?;
            let mut ids: HashMap<Vec<usize>, usize> = HashMap::new();
            let cell: Vec<usize> = (0..n)
                .map(|i| {
                    let key: Vec<usize> = codes.iter().map(|c| c[i]).collect();
                    let next = ids.len();
                    *ids.entry(key).or_insert(next)
                })
                .collect();
            let n_cells = ids.len();
            let mut sizes = vec![0usize; n_cells];
            for &c in &cell {
                sizes[c] += 1;
            }
            if sizes.iter().any(|&s| s != sizes[0]) {
                return Err(InferenceError::UnbalancedDesign(format!("cells of {label} differ in size")));
            }
            if raw.iter().any(|s| s.n_cells == n_cells && refines(&s.cell, &cell, n_cells)) {
                continue;
            }
            let cell_size = sizes[0] as f64;
            raw.push(Stratum { label, random, cell, n_cells, cell_size, parents: vec![], df: 0 });
        }
        raw.sort_by_key(|s| s.n_cells);
        let mut total = 0;
        for j in 0..raw.len() {
            let parents: Vec<usize> =
                (0..j).filter(|&k| refines(&raw[j].cell, &raw[k].cell, raw[k].n_cells)).collect();
            let taken: usize = parents.iter().map(|&k| raw[k].df).sum();
            raw[j].df = raw[j].n_cells.saturating_sub(taken);
            raw[j].parents = parents;
            total += raw[j].df;
        }
        Ok(Self { strata: raw, n, residual_df: n - total })
    }

    /// Stratum components of `v`, plus the residual.
    fn components(&self, v: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut comps: Vec<Vec<f64>> = Vec::with_capacity(self.strata.len());
        for s in &self.strata {
            let mut sums = vec![0.0; s.n_cells];
            for (i, &c) in s.cell.iter().enumerate() {
                sums[c] += v[i];
            }
            let mut e: Vec<f64> = s.cell.iter().map(|&c| sums[c] / s.cell_size).collect();
            for &p in &s.parents {
                for (a, b) in e.iter_mut().zip(&comps[p]) {
                    *a -= b;
                }
            }
            comps.push(e);
        }
        let mut r = v.to_vec();
        for c in &comps {
            for (a, b) in r.iter_mut().zip(c) {
                *a -= b;
            }
        }
        (comps, r)
    }
}

/// True when every cell of `fine` lies inside one cell of `coarse`.
fn refines(fine: &[usize], coarse: &[usize], n_coarse_cells: usize) -> bool {
    let mut map: HashMap<usize, usize> = HashMap::with_capacity(n_coarse_cells);
    fine.iter().zip(coarse).all(|(&f, &c)| *map.entry(f).or_insert(c) == c)
}

fn unit_columns(spec: &ModelSpec, unit: UnitKind) -> Vec<String> {
    match unit {
        UnitKind::Participant => vec![spec.participant.clone()],
        UnitKind::Stimulus => vec![spec.stimulus.clone()],
        UnitKind::ParticipantStimulus => vec![spec.participant.clone(), spec.stimulus.clone()],
    }
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Quasi-F test of one fixed term for a balanced design, using the random
/// terms of `spec` as variance components.
pub fn quasi_f(data: &Dataset, spec: &ModelSpec, effect: &str) -> Result<TestResult, InferenceError> {
    let mut parts = vec![("(Intercept)".to_string(), false, vec![])];
    for t in &spec.fixed_terms {
        let vars = t.iter().map(|&i| spec.fixed_factors[i].name().to_string()).collect();
        parts.push((spec.fixed_term_label(t), false, vars));
    }
    for t in &spec.random_terms {
        let mut vars = unit_columns(spec, t.unit.tag);
        vars.extend(t.factors.iter().map(|f| f.name().to_string()));
        parts.push((t.label(), true, vars));
    }
    let dec = Decomposition::new(data, parts)?;
    let j = dec
        .strata
        .iter()
        .position(|s| s.label == effect && !s.random)
        .ok_or_else(|| InferenceError::UnknownEffect(effect.to_string()))?;
    if dec.strata[j].df == 0 {
        return Err(InferenceError::DegenerateHypothesis);
    }

    let y = data.real(&spec.response)?;
    let (comps, resid) = dec.components(y);
    let mut ms: Vec<f64> = comps.iter().zip(&dec.strata).map(|(c, s)| sq(c) / s.df.max(1) as f64).collect();
    let res_ms = if dec.residual_df > 0 { sq(&resid) / dec.residual_df as f64 } else { 0.0 };

    // Coefficients of each variance component in every expected mean square.
    let structure = realize(spec, CovFamily::new(FamilyTag::Ganova, spec.has_pair_unit())).map_err(FitError::from)?;
    let design = build_design(spec, data, &structure).map_err(FitError::from)?;
    let n_comp: usize = design.units.iter().map(|u| u.terms.len()).sum();
    let rows = dec.strata.len() + 1;
    let mut k = DMatrix::zeros(rows, n_comp + 1);
    k.column_mut(n_comp).fill(1.0);
    let mut c = 0;
    for u in &design.units {
        for (_, range) in &u.terms {
            for col in range.clone() {
                for g in 0..u.n_groups {
                    let z: Vec<f64> = (0..dec.n)
                        .map(|i| if u.group[i] == g { u.values[(i, col)] } else { 0.0 })
                        .collect();
                    let (zc, zr) = dec.components(&z);
                    for (s, v) in zc.iter().enumerate() {
                        k[(s, c)] += sq(v);
                    }
                    k[(rows - 1, c)] += sq(&zr);
                }
            }
            c += 1;
        }
    }
    for (s, st) in dec.strata.iter().enumerate() {
        let df = st.df.max(1) as f64;
        for col in 0..n_comp {
            k[(s, col)] /= df;
        }
    }
    for col in 0..n_comp {
        k[(rows - 1, col)] /= dec.residual_df.max(1) as f64;
    }

    // Candidate denominators: random strata and the residual.
    let mut cand: Vec<usize> =
        (0..dec.strata.len()).filter(|&s| dec.strata[s].random && dec.strata[s].df > 0).collect();
    let mut dfs: Vec<f64> = cand.iter().map(|&s| dec.strata[s].df as f64).collect();
    if dec.residual_df > 0 {
        cand.push(rows - 1);
        dfs.push(dec.residual_df as f64);
        ms.push(res_ms);
    } else {
        ms.push(0.0);
    }
    let a = DMatrix::from_fn(n_comp + 1, cand.len(), |r, q| k[(cand[q], r)]);
    let target = k.row(j).transpose();
    let w = a
        .clone()
        .svd(true, true)
        .solve(&target, 1e-10)
        .map_err(|_| InferenceError::NoQuasiDenominator(effect.to_string()))?;
    if (&a * &w - &target).norm() > 1e-8 * (1.0 + target.norm()) {
        return Err(InferenceError::NoQuasiDenominator(effect.to_string()));
    }

    let ms_j = ms[j];
    let df_j = dec.strata[j].df as f64;
    let terms: Vec<(f64, f64, f64)> = cand
        .iter()
        .zip(&dfs)
        .zip(w.iter())
        .filter(|(_, &wi)| wi.abs() > 1e-12)
        .map(|((&s, &df), &wi)| (wi, ms[s], df))
        .collect();
    let satt = |parts: &[(f64, f64, f64)]| {
        let total: f64 = parts.iter().map(|(w, m, _)| w * m).sum();
        let spread: f64 = parts.iter().map(|(w, m, df)| (w * m).powi(2) / df).sum();
        (total, total * total / spread)
    };
    let den_full = satt(&terms);
    let (num, df_num, den, df_den) = if den_full.0 > 0.0 {
        (ms_j, df_j, den_full.0, den_full.1)
    } else {
        // Negative combination: move the subtracted mean squares to the
        // numerator.
        let mut top = vec![(1.0, ms_j, df_j)];
        top.extend(terms.iter().filter(|t| t.0 < 0.0).map(|&(w, m, df)| (-w, m, df)));
        let bottom: Vec<_> = terms.iter().filter(|t| t.0 > 0.0).copied().collect();
        let (n, dn) = satt(&top);
        let (d, dd) = satt(&bottom);
        (n, dn, d, dd)
    };
    let (f, p) = if num <= 1e-14 * (1.0 + den.abs()) {
        (0.0, 1.0)
    } else if den <= 0.0 {
        (f64::INFINITY, 0.0)
    } else {
        let f = num / den;
        (f, f_upper_tail(f, df_num, df_den))
    };
    Ok(TestResult {
        effect: effect.to_string(),
        f,
        df_num,
        df_den: if df_den.is_finite() { df_den } else { dfs.iter().copied().fold(0.0, f64::max) },
        p_value: p,
        df_fallback: !df_den.is_finite(),
        singular_hessian: false,
    })
}
