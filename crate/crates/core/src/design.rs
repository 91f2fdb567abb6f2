//! Fixed and random design matrices.
//!
//! Each random-effect row of a unit is the Kronecker product of the term
//! codings of the observation's factor levels, placed in the columns of the
//! observation's group: the rowwise Khatri-Rao product of the unit's
//! indicator matrix with the term coding. Only the per-row values and the
//! group index are stored; sparse blocks are assembled on request.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use sprs::{CsMat, TriMat};
use thiserror::Error;

use crate::contrasts::{kron_rows, make_contrast, ContrastError, ContrastKind, ContrastMatrix};
use crate::covariance::CovStructure;
use crate::data::{DataError, Dataset};
use crate::formula::{Factor, ModelSpec, RandomTerm, UnitKind};

#[derive(Debug, Error)]
pub enum DesignError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("factor `{name}` is declared with {declared} levels but the data has {found}")]
    LevelMismatch { name: String, declared: usize, found: usize },
    #[error(transparent)]
    Contrast(#[from] ContrastError),
    #[error("structure does not match the model's random terms")]
    StructureMismatch,
}

/// Random-effect design of one grouping unit.
#[derive(Debug, Clone)]
pub struct UnitDesign {
    pub unit: UnitKind,
    pub n_groups: usize,
    pub dim: usize,
    /// Group of every observation.
    pub group: Vec<usize>,
    /// Per-observation coded values, `n_obs × dim`.
    pub values: DMatrix<f64>,
    pub terms: Vec<(RandomTerm, Range<usize>)>,
}

impl UnitDesign {
    pub fn q(&self) -> usize {
        self.n_groups * self.dim
    }

    /// Sparse `n_obs × (n_groups·width)` block for one term, columns
    /// group-major.
    pub fn term_block(&self, term_idx: usize) -> CsMat<f64> {
        let cols = self.terms[term_idx].1.clone();
        let w = cols.len();
        let n = self.group.len();
        let mut tri = TriMat::new((n, self.n_groups * w));
        for (i, &g) in self.group.iter().enumerate() {
            for (k, c) in cols.clone().enumerate() {
                let v = self.values[(i, c)];
                if v != 0.0 {
                    tri.add_triplet(i, g * w + k, v);
                }
            }
        }
        tri.to_csc()
    }
}

#[derive(Debug, Clone)]
pub struct DesignMatrices {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    /// Column range of every fixed term in `x`; the intercept is column 0.
    pub fixed_cols: Vec<Range<usize>>,
    pub fixed_labels: Vec<String>,
    pub units: Vec<UnitDesign>,
}

impl DesignMatrices {
    pub fn n_obs(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.units.iter().map(|u| u.q()).sum()
    }

    pub fn n_groups(&self) -> Vec<usize> {
        self.units.iter().map(|u| u.n_groups).collect()
    }

    /// Every random term with its sparse block.
    pub fn z_blocks(&self) -> Vec<(RandomTerm, CsMat<f64>)> {
        let mut out = Vec::new();
        for u in &self.units {
            for (k, (t, _)) in u.terms.iter().enumerate() {
                out.push((t.clone(), u.term_block(k)));
            }
        }
        out
    }

    /// Full `Z` in the column order used by `theta_to_lambda`.
    pub fn z_sparse(&self) -> CsMat<f64> {
        let n = self.n_obs();
        let mut tri = TriMat::new((n, self.q()));
        let mut base = 0;
        for u in &self.units {
            for i in 0..n {
                let o = base + u.group[i] * u.dim;
                for c in 0..u.dim {
                    let v = u.values[(i, c)];
                    if v != 0.0 {
                        tri.add_triplet(i, o + c, v);
                    }
                }
            }
            base += u.q();
        }
        tri.to_csc()
    }

    pub fn z_dense(&self) -> DMatrix<f64> {
        let z = self.z_sparse();
        let mut d = DMatrix::zeros(z.rows(), z.cols());
        for (v, (i, j)) in z.iter() {
            d[(i, j)] = *v;
        }
        d
    }
}

fn factor_codes<'a>(data: &'a Dataset, f: &Factor) -> Result<&'a [usize], DesignError> {
    let c = data.categorical(f.name())?;
    if c.levels.len() != f.n_levels() {
        return Err(DesignError::LevelMismatch {
            name: f.name().to_string(),
            declared: f.n_levels(),
            found: c.levels.len(),
        });
    }
    Ok(&c.codes)
}

/// Renumbers codes to the observed values, keeping their order.
fn compress(codes: &[usize]) -> (Vec<usize>, usize) {
    let max = codes.iter().copied().max().map_or(0, |m| m + 1);
    let mut map = vec![usize::MAX; max];
    for &c in codes {
        map[c] = 0;
    }
    let mut next = 0;
    for m in map.iter_mut().filter(|m| **m == 0) {
        *m = next;
        next += 1;
    }
    (codes.iter().map(|&c| map[c]).collect(), next)
}

/// Group index per observation for a unit.
pub fn unit_groups(
    data: &Dataset,
    spec: &ModelSpec,
    unit: UnitKind,
) -> Result<(Vec<usize>, usize), DesignError> {
    match unit {
        UnitKind::Participant => Ok(compress(&data.categorical(&spec.participant)?.codes)),
        UnitKind::Stimulus => Ok(compress(&data.categorical(&spec.stimulus)?.codes)),
        UnitKind::ParticipantStimulus => {
            let (p, _) = compress(&data.categorical(&spec.participant)?.codes);
            let (s, ns) = compress(&data.categorical(&spec.stimulus)?.codes);
            let pair: Vec<usize> = p.iter().zip(&s).map(|(a, b)| a * ns + b).collect();
            Ok(compress(&pair))
        }
    }
}

/// Fixed-effect matrix: intercept, then every fixed term as the Kronecker
/// product of its factors' sum contrasts.
pub fn fixed_design(
    spec: &ModelSpec,
    data: &Dataset,
) -> Result<(DMatrix<f64>, Vec<Range<usize>>, Vec<String>), DesignError> {
    let n = data.n_obs();
    let codes: Vec<&[usize]> = spec
        .fixed_factors
        .iter()
        .map(|f| factor_codes(data, f))
        .collect::<Result<_, _>>()?;
    let contrasts: Vec<ContrastMatrix> = spec
        .fixed_factors
        .iter()
        .map(|f| make_contrast(f.n_levels(), ContrastKind::Sum))
        .collect::<Result<_, _>>()?;
    let mut cols = vec![0..1];
    let mut labels = vec!["(Intercept)".to_string()];
    let mut p = 1;
    for t in &spec.fixed_terms {
        let w: usize = t.iter().map(|&i| contrasts[i].n_cols()).product();
        cols.push(p..p + w);
        labels.push(spec.fixed_term_label(t));
        p += w;
    }
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        for (t, r) in spec.fixed_terms.iter().zip(&cols[1..]) {
            let rows: Vec<Vec<f64>> = t.iter().map(|&f| contrasts[f].row(codes[f][i])).collect();
            for (k, v) in kron_rows(&rows).into_iter().enumerate() {
                x[(i, r.start + k)] = v;
            }
        }
    }
    Ok((x, cols, labels))
}

/// Builds `y`, `X` and the per-unit random designs for a realized structure.
pub fn build_design(
    spec: &ModelSpec,
    data: &Dataset,
    structure: &CovStructure,
) -> Result<DesignMatrices, DesignError> {
    let y = DVector::from_column_slice(data.real(&spec.response)?);
    let (x, fixed_cols, fixed_labels) = fixed_design(spec, data)?;
    let n = data.n_obs();
    let mut units = Vec::with_capacity(structure.units.len());
    for ul in &structure.units {
        let (group, n_groups) = unit_groups(data, spec, ul.unit)?;
        let mut values = DMatrix::zeros(n, ul.dim);
        let mut terms = Vec::with_capacity(ul.terms.len());
        for tl in &ul.terms {
            let fcodes: Vec<&[usize]> = tl
                .term
                .factors
                .iter()
                .map(|f| factor_codes(data, f))
                .collect::<Result<_, _>>()?;
            let cms: Vec<ContrastMatrix> = tl
                .term
                .factors
                .iter()
                .map(|f| make_contrast(f.n_levels(), tl.coding))
                .collect::<Result<_, _>>()?;
            for i in 0..n {
                let rows: Vec<Vec<f64>> =
                    cms.iter().zip(&fcodes).map(|(c, codes)| c.row(codes[i])).collect();
                let kr = kron_rows(&rows);
                if kr.len() != tl.width {
                    return Err(DesignError::StructureMismatch);
                }
                for (k, v) in kr.into_iter().enumerate() {
                    values[(i, tl.offset + k)] = v;
                }
            }
            terms.push((tl.term.clone(), tl.columns()));
        }
        units.push(UnitDesign { unit: ul.unit, n_groups, dim: ul.dim, group, values, terms });
    }
    Ok(DesignMatrices { y, x, fixed_cols, fixed_labels, units })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{realize, CovFamily, FamilyTag};
    use crate::formula::{parse_formula, Design, FactorKind, FactorTable};

    /// Full crossing of 18 participants and 18 stimuli with the M1 factors.
    fn m1_data(np: usize, ns: usize) -> Dataset {
        let mut pt = Vec::new();
        let mut sm = Vec::new();
        let mut am = Vec::new();
        for p in 0..np {
            for s in 0..ns {
                for a in 0..2 {
                    pt.push(p);
                    sm.push(s);
                    am.push(a);
                }
            }
        }
        let n = pt.len();
        let mut d = Dataset::new();
        d.add_real("y", (0..n).map(|i| (i as f64).sin()).collect()).unwrap();
        d.add_indexed("Ap", 2, pt.iter().map(|p| p % 2).collect()).unwrap();
        d.add_indexed("As", 2, sm.iter().map(|s| s % 2).collect()).unwrap();
        d.add_indexed("PT", np, pt).unwrap();
        d.add_indexed("SM", ns, sm).unwrap();
        d.add_indexed("Am", 2, am).unwrap();
        d
    }

    fn m1_table() -> FactorTable {
        FactorTable::from_factors(&Design::M1.factors())
    }

    #[test]
    fn ri_block_widths() {
        let data = m1_data(18, 18);
        let spec = parse_formula("y ~ Ap*As*Am + (1|PT) + (1|SM) + (1|PT:SM)", &m1_table()).unwrap();
        let s = realize(&spec, CovFamily::new(FamilyTag::Ri, true)).unwrap();
        let d = build_design(&spec, &data, &s).unwrap();
        let widths: Vec<usize> = d.z_blocks().iter().map(|(_, b)| b.cols()).collect();
        assert_eq!(widths, [18, 18, 324]);
        assert_eq!(d.p(), 8);
        for (_, b) in d.z_blocks() {
            // One indicator per row; every group column sums to its size.
            assert_eq!(b.nnz(), data.n_obs());
        }
    }

    #[test]
    fn ganova_slope_block() {
        let data = m1_data(5, 4);
        let am = Factor::new("Am", FactorKind::M, 2).unwrap();
        let t = FactorTable::from_factors(&[am]);
        let spec = parse_formula("y ~ Am + (1|PT|Am)", &t).unwrap();
        let s = realize(&spec, CovFamily::new(FamilyTag::Ganova, false)).unwrap();
        let d = build_design(&spec, &data, &s).unwrap();
        let w: Vec<usize> = d.z_blocks().iter().map(|(_, b)| b.cols()).collect();
        assert_eq!(w, [5, 5]);
    }

    #[test]
    fn fixed_design_is_sum_coded() {
        let data = m1_data(4, 4);
        let spec = parse_formula("y ~ Ap*As*Am + (1|PT)", &m1_table()).unwrap();
        let (x, cols, labels) = fixed_design(&spec, &data).unwrap();
        assert_eq!(labels, ["(Intercept)", "Ap", "As", "Am", "Ap:As", "Ap:Am", "As:Am", "Ap:As:Am"]);
        assert_eq!(cols.len(), 8);
        // Balanced data: sum-coded columns are orthogonal to the intercept.
        for j in 1..x.ncols() {
            assert_eq!(x.column(j).sum(), 0.0);
        }
        assert_eq!(x[(1, 3)], -1.0);
        assert_eq!(x[(0, 3)], 1.0);
    }

    #[test]
    fn level_mismatch_detected() {
        let data = m1_data(4, 4);
        let t = FactorTable::from_factors(&[Factor::new("Am", FactorKind::M, 3).unwrap()]);
        let spec = parse_formula("y ~ Am + (1|PT)", &t).unwrap();
        let s = realize(&spec, CovFamily::new(FamilyTag::Ri, false)).unwrap();
        assert!(matches!(build_design(&spec, &data, &s), Err(DesignError::LevelMismatch { .. })));
    }

    #[test]
    fn ganova_and_ril_covariances_differ_by_centering() {
        // For one participant the gANOVA slope covariance is X C Cᵀ Xᵀ and
        // the RI-L one is X Xᵀ; the gap is a·11ᵀ with a = 1/ℓ.
        let am = Factor::new("Am", FactorKind::M, 3).unwrap();
        let t = FactorTable::from_factors(&[am]);
        let spec = parse_formula("y ~ Am + (1|PT|Am)", &t).unwrap();
        let mut data = Dataset::new();
        let pt: Vec<usize> = (0..12).map(|i| i / 6).collect();
        let am: Vec<usize> = (0..12).map(|i| i % 3).collect();
        data.add_real("y", vec![0.0; 12]).unwrap();
        data.add_indexed("PT", 2, pt).unwrap();
        data.add_indexed("SM", 1, vec![0; 12]).unwrap();
        data.add_indexed("Am", 3, am).unwrap();
        let g = realize(&spec, CovFamily::new(FamilyTag::Ganova, false)).unwrap();
        let r = realize(&spec, CovFamily::new(FamilyTag::RiL, false)).unwrap();
        let dg = build_design(&spec, &data, &g).unwrap();
        let dr = build_design(&spec, &data, &r).unwrap();
        let slope = |d: &DesignMatrices| {
            let b = d.units[0].term_block(1);
            let mut m = DMatrix::zeros(b.rows(), b.cols());
            for (v, (i, j)) in b.iter() {
                m[(i, j)] = *v;
            }
            &m * m.transpose()
        };
        let ones = |d: &DesignMatrices| {
            let b = d.units[0].term_block(0);
            let mut m = DMatrix::zeros(b.rows(), b.cols());
            for (v, (i, j)) in b.iter() {
                m[(i, j)] = *v;
            }
            &m * m.transpose()
        };
        let gap = slope(&dr) - slope(&dg) - ones(&dr) / 3.0;
        assert!(gap.abs().max() < 1e-10);
    }
}
