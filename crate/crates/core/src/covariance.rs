//! Correlation-structure families as parameter layouts over random terms.
//!
//! Random-effect columns are arranged per grouping unit. Within a unit each
//! group (participant, stimulus or pair) owns `dim` consecutive columns, the
//! concatenation of the unit's term codings. The relative covariance factor
//! is `Λ = blockdiag_u(I_{g_u} ⊗ T_u)` with `T_u` lower triangular and built
//! from the unit's variance blocks.

use std::fmt;
use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sprs::{CsMat, TriMat};
use thiserror::Error;

use crate::contrasts::ContrastKind;
use crate::formula::{Factor, FormulaError, ModelSpec, RandomTerm, UnitKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CovError {
    #[error("structure incompatible with the model: {0}")]
    IncompatibleSpec(String),
    #[error("theta has length {got}, structure needs {expected}")]
    ThetaLength { expected: usize, got: usize },
    #[error("theta[{index}] = {value} violates its lower bound")]
    Domain { index: usize, value: f64 },
    #[error(transparent)]
    Formula(#[from] FormulaError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FamilyTag {
    Ri,
    RiL,
    Max,
    ZcpSum,
    ZcpPoly,
    Ganova,
}

impl FamilyTag {
    pub const ALL: [FamilyTag; 6] = [
        Self::Ri,
        Self::RiL,
        Self::Max,
        Self::ZcpSum,
        Self::ZcpPoly,
        Self::Ganova,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Ri => "RI",
            Self::RiL => "RI-L",
            Self::Max => "MAX",
            Self::ZcpSum => "ZCP-sum",
            Self::ZcpPoly => "ZCP-poly",
            Self::Ganova => "gANOVA",
        }
    }

    /// Coding applied to the factors of random terms.
    pub fn coding(&self) -> ContrastKind {
        match self {
            Self::Ri | Self::RiL => ContrastKind::Identity,
            Self::ZcpSum => ContrastKind::Sum,
            Self::ZcpPoly | Self::Max | Self::Ganova => ContrastKind::OrthonormalPolynomial,
        }
    }
}

/// A family plus whether the participant:stimulus unit is modelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CovFamily {
    pub tag: FamilyTag,
    pub include_ps: bool,
}

impl CovFamily {
    pub fn new(tag: FamilyTag, include_ps: bool) -> Self {
        Self { tag, include_ps }
    }

    /// Accepts names like `gANOVA`, `ganova+`, `RI-L`, `ril`, `zcp`, `zcp-sum`.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        let (base, include_ps) = match s.strip_suffix('+') {
            Some(b) => (b, true),
            None => (s, false),
        };
        let norm: String = base
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        let tag = match norm.as_str() {
            "ri" => FamilyTag::Ri,
            "ril" => FamilyTag::RiL,
            "max" => FamilyTag::Max,
            "zcpsum" => FamilyTag::ZcpSum,
            "zcp" | "zcppoly" => FamilyTag::ZcpPoly,
            "ganova" => FamilyTag::Ganova,
            _ => return None,
        };
        Some(Self { tag, include_ps })
    }

    /// The ten rows of the parameter-count table, in order.
    pub fn table_rows() -> Vec<CovFamily> {
        let tags = [FamilyTag::Ri, FamilyTag::RiL, FamilyTag::Max, FamilyTag::ZcpPoly, FamilyTag::Ganova];
        [false, true]
            .iter()
            .flat_map(|&ps| tags.iter().map(move |&t| CovFamily::new(t, ps)))
            .collect()
    }
}

impl fmt::Display for CovFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.tag.name(), if self.include_ps { "+" } else { "" })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    /// One relative sd shared by every column of a term.
    SharedScalar,
    /// One relative sd per column.
    PerContrastScalar,
    /// Unstructured lower-triangular factor over the columns.
    FullCholesky,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceBlock {
    pub unit: UnitKind,
    /// Columns within one group of the unit.
    pub columns: Range<usize>,
    pub kind: BlockKind,
    pub theta_offset: usize,
    pub label: String,
}

impl VarianceBlock {
    pub fn n_theta(&self) -> usize {
        let d = self.columns.len();
        match self.kind {
            BlockKind::SharedScalar => 1,
            BlockKind::PerContrastScalar => d,
            BlockKind::FullCholesky => d * (d + 1) / 2,
        }
    }

    pub fn theta_range(&self) -> Range<usize> {
        self.theta_offset..self.theta_offset + self.n_theta()
    }
}

/// Columns of one random term within its unit's per-group block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermLayout {
    pub term: RandomTerm,
    pub coding: ContrastKind,
    pub offset: usize,
    pub width: usize,
}

impl TermLayout {
    pub fn columns(&self) -> Range<usize> {
        self.offset..self.offset + self.width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitLayout {
    pub unit: UnitKind,
    pub terms: Vec<TermLayout>,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovStructure {
    /// `None` for structures produced by selection rather than a family.
    pub family: Option<CovFamily>,
    pub units: Vec<UnitLayout>,
    pub blocks: Vec<VarianceBlock>,
}

pub fn term_width(factors: &[Factor], coding: ContrastKind) -> usize {
    factors
        .iter()
        .map(|f| if coding == ContrastKind::Identity { f.n_levels() } else { f.n_levels() - 1 })
        .product()
}

impl CovStructure {
    /// Builds a structure from per-term codings and a block assignment. Each
    /// entry of `blocks` lists term indices (into the unit's terms) and a kind;
    /// terms of one block must be contiguous.
    pub fn from_layout(
        family: Option<CovFamily>,
        units: Vec<UnitLayout>,
        assignment: &[(UnitKind, Vec<usize>, BlockKind)],
    ) -> Result<Self, CovError> {
        let mut blocks = Vec::new();
        let mut off = 0;
        for (unit, term_idx, kind) in assignment {
            let ul = units
                .iter()
                .find(|u| u.unit == *unit)
                .ok_or_else(|| CovError::IncompatibleSpec(format!("no {unit} terms")))?;
            let first = &ul.terms[term_idx[0]];
            let last = &ul.terms[*term_idx.last().unwrap()];
            let columns = first.offset..last.offset + last.width;
            let label = if term_idx.len() == 1 {
                first.term.label()
            } else {
                first.term.unit.id_column.clone()
            };
            let b = VarianceBlock { unit: *unit, columns, kind: *kind, theta_offset: off, label };
            off += b.n_theta();
            blocks.push(b);
        }
        let s = Self { family, units, blocks };
        s.check_cover()?;
        Ok(s)
    }

    fn check_cover(&self) -> Result<(), CovError> {
        for u in &self.units {
            let mut covered = vec![0u8; u.dim];
            for b in self.blocks.iter().filter(|b| b.unit == u.unit) {
                for c in b.columns.clone() {
                    covered[c] += 1;
                }
            }
            if covered.iter().any(|&c| c != 1) {
                return Err(CovError::IncompatibleSpec(format!(
                    "variance blocks do not partition the {} columns",
                    u.unit
                )));
            }
        }
        Ok(())
    }

    /// Number of covariance parameters of the random effects, residual
    /// variance excluded.
    pub fn n_params(&self) -> usize {
        self.blocks.iter().map(|b| b.n_theta()).sum()
    }

    /// Parameter count including the residual variance.
    pub fn n_params_with_residual(&self) -> usize {
        self.n_params() + 1
    }

    pub fn n_theta(&self) -> usize {
        self.n_params()
    }

    pub fn unit(&self, tag: UnitKind) -> Option<&UnitLayout> {
        self.units.iter().find(|u| u.unit == tag)
    }

    /// Lower bounds: 0 for scalars and Cholesky diagonals, −∞ off-diagonal.
    pub fn lower_bounds(&self) -> Vec<f64> {
        let mut lb = Vec::with_capacity(self.n_theta());
        for b in &self.blocks {
            match b.kind {
                BlockKind::SharedScalar | BlockKind::PerContrastScalar => {
                    lb.extend(std::iter::repeat(0.0).take(b.n_theta()))
                }
                BlockKind::FullCholesky => {
                    let d = b.columns.len();
                    for j in 0..d {
                        for i in j..d {
                            lb.push(if i == j { 0.0 } else { f64::NEG_INFINITY });
                        }
                    }
                }
            }
        }
        lb
    }

    /// Unit relative variances and identity Cholesky factors.
    pub fn theta0(&self) -> Vec<f64> {
        self.lower_bounds()
            .into_iter()
            .map(|l| if l == 0.0 { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn check_theta(&self, theta: &[f64]) -> Result<(), CovError> {
        if theta.len() != self.n_theta() {
            return Err(CovError::ThetaLength { expected: self.n_theta(), got: theta.len() });
        }
        for (i, (&t, l)) in theta.iter().zip(self.lower_bounds()).enumerate() {
            if !t.is_finite() || t < l {
                return Err(CovError::Domain { index: i, value: t });
            }
        }
        Ok(())
    }

    /// Per-group factor `T_u` for the unit at position `unit_idx`.
    pub fn template(&self, unit_idx: usize, theta: &[f64]) -> DMatrix<f64> {
        let ul = &self.units[unit_idx];
        let mut t = DMatrix::zeros(ul.dim, ul.dim);
        for b in self.blocks.iter().filter(|b| b.unit == ul.unit) {
            let th = &theta[b.theta_range()];
            let c0 = b.columns.start;
            match b.kind {
                BlockKind::SharedScalar => {
                    for c in b.columns.clone() {
                        t[(c, c)] = th[0];
                    }
                }
                BlockKind::PerContrastScalar => {
                    for (k, c) in b.columns.clone().enumerate() {
                        t[(c, c)] = th[k];
                    }
                }
                BlockKind::FullCholesky => {
                    let d = b.columns.len();
                    let mut k = 0;
                    for j in 0..d {
                        for i in j..d {
                            t[(c0 + i, c0 + j)] = th[k];
                            k += 1;
                        }
                    }
                }
            }
        }
        t
    }

    /// Relative covariance `T_u T_uᵀ` of one group's effects.
    pub fn relative_cov(&self, unit_idx: usize, theta: &[f64]) -> DMatrix<f64> {
        let t = self.template(unit_idx, theta);
        &t * t.transpose()
    }

    /// Θ entries whose value sits on the zero bound, flagged per parameter.
    pub fn boundary_flags(&self, theta: &[f64], tol: f64) -> Vec<bool> {
        self.lower_bounds()
            .iter()
            .zip(theta)
            .map(|(&l, &t)| l == 0.0 && t.abs() <= tol)
            .collect()
    }

    /// Human-readable names for the theta entries.
    pub fn theta_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for b in &self.blocks {
            match b.kind {
                BlockKind::SharedScalar => out.push(b.label.clone()),
                BlockKind::PerContrastScalar => {
                    if b.columns.len() == 1 {
                        out.push(b.label.clone());
                    } else {
                        out.extend((0..b.columns.len()).map(|k| format!("{}[{}]", b.label, k + 1)));
                    }
                }
                BlockKind::FullCholesky => {
                    let d = b.columns.len();
                    for j in 0..d {
                        for i in j..d {
                            out.push(format!("{}.L[{},{}]", b.label, i + 1, j + 1));
                        }
                    }
                }
            }
        }
        out
    }

    /// Fresh starting values for `self` taken from a fit of `old`. Columns are
    /// matched by term and coding; unmatched columns start at the defaults.
    pub fn warm_start(&self, old: &CovStructure, old_theta: &[f64]) -> Vec<f64> {
        let mut theta = self.theta0();
        for b in &self.blocks {
            let Some(ui) = self.units.iter().position(|u| u.unit == b.unit) else { continue };
            let Some(oi) = old.units.iter().position(|u| u.unit == b.unit) else { continue };
            let old_cov = old.relative_cov(oi, old_theta);
            // Map each column of the block to a column of the old unit.
            let map: Vec<Option<usize>> = b
                .columns
                .clone()
                .map(|c| {
                    let tl = self.units[ui].terms.iter().find(|t| t.columns().contains(&c))?;
                    let ot = old.units[oi]
                        .terms
                        .iter()
                        .find(|o| o.term.same_effect(&tl.term) && o.coding == tl.coding)?;
                    Some(ot.offset + (c - tl.offset))
                })
                .collect();
            let var = |k: usize| map[k].map(|o| old_cov[(o, o)]).unwrap_or(1.0);
            let th = &mut theta[b.theta_range()];
            match b.kind {
                BlockKind::SharedScalar => {
                    let d = b.columns.len();
                    th[0] = ((0..d).map(var).sum::<f64>() / d as f64).max(0.0).sqrt();
                }
                BlockKind::PerContrastScalar => {
                    for (k, v) in th.iter_mut().enumerate() {
                        *v = var(k).max(0.0).sqrt();
                    }
                }
                BlockKind::FullCholesky => {
                    let d = b.columns.len();
                    let sub = DMatrix::from_fn(d, d, |i, j| match (map[i], map[j]) {
                        (Some(a), Some(c)) => old_cov[(a, c)],
                        _ if i == j => 1.0,
                        _ => 0.0,
                    });
                    let ridge = 1e-8 * (1.0 + sub.diagonal().max());
                    let sub = sub + DMatrix::identity(d, d) * ridge;
                    if let Some(ch) = sub.cholesky() {
                        let l = ch.l();
                        let mut k = 0;
                        for j in 0..d {
                            for i in j..d {
                                th[k] = l[(i, j)];
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
        theta
    }
}

/// Lays out the random terms of `spec` per unit with the given coding.
pub fn unit_layouts(spec: &ModelSpec, coding: ContrastKind) -> Vec<UnitLayout> {
    let mut units: Vec<UnitLayout> = Vec::new();
    for t in &spec.random_terms {
        if units.last().map(|u| u.unit) != Some(t.unit.tag) {
            units.push(UnitLayout { unit: t.unit.tag, terms: Vec::new(), dim: 0 });
        }
        let u = units.last_mut().unwrap();
        let width = term_width(&t.factors, coding);
        u.terms.push(TermLayout { term: t.clone(), coding, offset: u.dim, width });
        u.dim += width;
    }
    units
}

/// Realizes a family over the random terms of `spec`. Whether the pair unit
/// is modelled follows the spec's terms.
pub fn realize(spec: &ModelSpec, family: CovFamily) -> Result<CovStructure, CovError> {
    realize_coded(spec, family, family.tag.coding())
}

/// As [`realize`] but with an explicit coding for random-term factors, e.g.
/// another orthonormal basis.
pub fn realize_coded(
    spec: &ModelSpec,
    family: CovFamily,
    coding: ContrastKind,
) -> Result<CovStructure, CovError> {
    let units = unit_layouts(spec, coding);
    if family.tag == FamilyTag::Ri {
        if let Some(t) = spec.random_terms.iter().find(|t| !t.is_intercept()) {
            return Err(CovError::IncompatibleSpec(format!(
                "random intercept structure cannot carry {}",
                t.label()
            )));
        }
    }
    let mut assignment = Vec::new();
    for u in &units {
        match family.tag {
            FamilyTag::Max => {
                assignment.push((u.unit, (0..u.terms.len()).collect(), BlockKind::FullCholesky));
            }
            FamilyTag::ZcpSum | FamilyTag::ZcpPoly => {
                for i in 0..u.terms.len() {
                    assignment.push((u.unit, vec![i], BlockKind::PerContrastScalar));
                }
            }
            FamilyTag::Ri | FamilyTag::RiL | FamilyTag::Ganova => {
                for i in 0..u.terms.len() {
                    assignment.push((u.unit, vec![i], BlockKind::SharedScalar));
                }
            }
        }
    }
    let family = CovFamily { include_ps: spec.has_pair_unit(), ..family };
    CovStructure::from_layout(Some(family), units, &assignment)
}

/// Parameter count of a family on the saturated model of a design, residual
/// variance excluded.
pub fn count_params(family: CovFamily, design: &[Factor]) -> Result<usize, CovError> {
    let spec = ModelSpec::saturated("y", design, family)?;
    Ok(realize(&spec, family)?.n_params())
}

/// `Λ(θ)` as a sparse lower-triangular matrix over all random-effect columns,
/// units in structure order, columns group-major within each unit.
pub fn theta_to_lambda(
    structure: &CovStructure,
    theta: &[f64],
    n_groups: &[usize],
) -> Result<CsMat<f64>, CovError> {
    structure.check_theta(theta)?;
    if n_groups.len() != structure.units.len() {
        return Err(CovError::IncompatibleSpec("one group count per unit expected".into()));
    }
    let q: usize = structure.units.iter().zip(n_groups).map(|(u, g)| u.dim * g).sum();
    let mut tri = TriMat::new((q, q));
    let mut base = 0;
    for (ui, (u, &g)) in structure.units.iter().zip(n_groups).enumerate() {
        let t = structure.template(ui, theta);
        for grp in 0..g {
            let o = base + grp * u.dim;
            for j in 0..u.dim {
                for i in j..u.dim {
                    if t[(i, j)] != 0.0 {
                        tri.add_triplet(o + i, o + j, t[(i, j)]);
                    }
                }
            }
        }
        base += g * u.dim;
    }
    Ok(tri.to_csc())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::{Design, FactorKind, FactorTable, parse_formula};

    #[test]
    fn family_names_parse() {
        for f in CovFamily::table_rows() {
            assert_eq!(CovFamily::parse(&f.to_string()), Some(f));
        }
        assert_eq!(CovFamily::parse("ril+"), Some(CovFamily::new(FamilyTag::RiL, true)));
        assert_eq!(CovFamily::parse("zcp-sum").unwrap().tag, FamilyTag::ZcpSum);
        assert!(CovFamily::parse("foo").is_none());
    }

    #[test]
    fn doc_examples() {
        let g = |t, ps, d: Design| count_params(CovFamily::new(t, ps), &d.factors()).unwrap();
        assert_eq!(g(FamilyTag::Ganova, false, Design::M2), 8);
        assert_eq!(g(FamilyTag::Max, true, Design::M5), 5311);
        assert_eq!(g(FamilyTag::ZcpPoly, false, Design::M2), 18);
        assert_eq!(g(FamilyTag::RiL, false, Design::M3), 16);
        for d in Design::ALL {
            assert_eq!(g(FamilyTag::Ri, true, d), 3);
        }
    }

    #[test]
    fn single_factor_participant_only() {
        let am = Factor::new("Am", FactorKind::M, 2).unwrap();
        let table = FactorTable::from_factors(std::slice::from_ref(&am));
        let spec = parse_formula("y ~ Am + (1|PT|Am)", &table).unwrap();
        let s = realize(&spec, CovFamily::new(FamilyTag::Ganova, false)).unwrap();
        assert_eq!(s.n_params(), 2);
        assert_eq!(s.n_params_with_residual(), 3);
    }

    #[test]
    fn ri_rejects_slopes() {
        let table = FactorTable::from_factors(&Design::M1.factors());
        let spec = parse_formula("y ~ Ap*As*Am + (1|PT|Am)", &table).unwrap();
        assert!(matches!(
            realize(&spec, CovFamily::new(FamilyTag::Ri, false)),
            Err(CovError::IncompatibleSpec(_))
        ));
    }

    #[test]
    fn zero_and_unit_theta() {
        let table = FactorTable::from_factors(&Design::M1.factors());
        let spec = parse_formula("y ~ Ap*As*Am + (1|PT) + (1|SM) + (1|PT:SM)", &table).unwrap();
        let s = realize(&spec, CovFamily::new(FamilyTag::Ri, true)).unwrap();
        let l = theta_to_lambda(&s, &[1.0, 1.0, 1.0], &[4, 5, 20]).unwrap();
        assert_eq!(l.rows(), 29);
        assert_eq!(l.nnz(), 29);
        assert!(l.iter().all(|(v, (i, j))| i == j && *v == 1.0));
        let z = theta_to_lambda(&s, &[0.0; 3], &[4, 5, 20]).unwrap();
        assert_eq!(z.nnz(), 0);
        assert!(theta_to_lambda(&s, &[1.0, -1.0, 1.0], &[4, 5, 20]).is_err());
        assert!(theta_to_lambda(&s, &[1.0], &[4, 5, 20]).is_err());
    }

    #[test]
    fn cholesky_block_reproduces_psd() {
        let am = Factor::new("Am", FactorKind::M, 2).unwrap();
        let table = FactorTable::from_factors(std::slice::from_ref(&am));
        let spec = parse_formula("y ~ Am + (1 + Am|PT)", &table).unwrap();
        let s = realize(&spec, CovFamily::new(FamilyTag::Max, false)).unwrap();
        assert_eq!(s.n_params(), 3);
        let target = DMatrix::from_row_slice(2, 2, &[2.0, -0.7, -0.7, 0.5]);
        let l = target.clone().cholesky().unwrap().l();
        let theta = [l[(0, 0)], l[(1, 0)], l[(1, 1)]];
        let lam = theta_to_lambda(&s, &theta, &[3]).unwrap().to_dense();
        for g in 0..3 {
            let b = DMatrix::from_fn(2, 2, |i, j| lam[[2 * g + i, 2 * g + j]]);
            let bb = &b * b.transpose();
            assert!((bb - &target).abs().max() < 1e-12);
        }
    }

    #[test]
    fn warm_start_recovers_own_solution() {
        let table = FactorTable::from_factors(&Design::M1.factors());
        let spec = parse_formula("y ~ Ap*As*Am + (Am|PT) + (Am|SM)", &table).unwrap();
        let max = realize(&spec, CovFamily::new(FamilyTag::Max, false)).unwrap();
        let theta = vec![1.2, 0.3, 0.8, 0.9, -0.2, 0.4];
        let again = max.warm_start(&max, &theta);
        for (a, b) in again.iter().zip(&theta) {
            assert!((a - b).abs() < 1e-6);
        }
        let zcp = realize(&spec, CovFamily::new(FamilyTag::ZcpPoly, false)).unwrap();
        let w = zcp.warm_start(&max, &theta);
        assert!((w[0] - 1.2).abs() < 1e-12);
        assert!((w[1] - (0.09f64 + 0.64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn theta_names_and_bounds_align() {
        let spec = ModelSpec::saturated("y", &Design::M2.factors(), CovFamily::new(FamilyTag::Max, true)).unwrap();
        let s = realize(&spec, CovFamily::new(FamilyTag::Max, true)).unwrap();
        assert_eq!(s.theta_names().len(), s.n_theta());
        assert_eq!(s.lower_bounds().len(), s.n_theta());
        assert_eq!(s.theta0().iter().filter(|&&v| v == 1.0).count(), 9 + 9 + 1);
    }
}
