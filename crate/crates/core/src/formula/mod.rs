//! Model formulas for crossed participant/stimulus designs.
//!
//! A formula names a response, a full-factorial fixed part and a list of
//! random terms. Every random term is the interaction of a grouping unit
//! (participants, stimuli or their crossing) with a set of design factors;
//! which interactions exist at all is decided by the factor taxonomy.

mod parser;

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use parser::parse_formula;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormulaError {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown identifier `{0}`")]
    UnknownIdentifier(String),
    #[error("random term {term} is not estimable: {unit} units are never measured in several levels of a {kind} factor")]
    Estimability {
        term: String,
        unit: UnitKind,
        kind: FactorKind,
    },
    #[error("duplicate random term {0}")]
    DuplicateTerm(String),
    #[error("factor `{0}` appears in a random term but not in the fixed part")]
    RandomFactorNotFixed(String),
    #[error("random term {0} is confounded with the residual error")]
    ConfoundedWithError(String),
    #[error("factor `{0}` repeated within one term")]
    RepeatedFactor(String),
    #[error("invalid factor `{name}`: {msg}")]
    InvalidFactor { name: String, msg: String },
}

/// Which sampled entity a factor describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FactorKind {
    /// Feature of the participant (between-participant).
    P,
    /// Feature of the stimulus.
    S,
    /// Experimental manipulation, crossed with both units.
    M,
    /// Feature of the participant/stimulus pair.
    PS,
    /// Feature of the single observation.
    O,
}

impl FactorKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "P" | "AP" => Some(Self::P),
            "S" | "AS" => Some(Self::S),
            "M" | "AM" => Some(Self::M),
            "PS" | "APS" => Some(Self::PS),
            "O" | "AO" => Some(Self::O),
            _ => None,
        }
    }
}

impl fmt::Display for FactorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::P => "A_P",
            Self::S => "A_S",
            Self::M => "A_M",
            Self::PS => "A_PS",
            Self::O => "A_O",
        };
        f.write_str(s)
    }
}

/// A categorical design factor with a fixed taxonomy kind.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Factor {
    name: String,
    kind: FactorKind,
    n_levels: usize,
}

impl Factor {
    pub fn new(name: impl Into<String>, kind: FactorKind, n_levels: usize) -> Result<Self, FormulaError> {
        let name = name.into();
        if n_levels < 2 {
            return Err(FormulaError::InvalidFactor {
                name,
                msg: format!("needs at least 2 levels, got {n_levels}"),
            });
        }
        Ok(Self { name, kind, n_levels })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> FactorKind {
        self.kind
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum UnitKind {
    Participant,
    Stimulus,
    ParticipantStimulus,
}

impl UnitKind {
    pub const ALL: [UnitKind; 3] = [Self::Participant, Self::Stimulus, Self::ParticipantStimulus];

    pub fn short(&self) -> &'static str {
        match self {
            Self::Participant => "P",
            Self::Stimulus => "S",
            Self::ParticipantStimulus => "PS",
        }
    }
}

impl fmt::Display for UnitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Participant => "participant",
            Self::Stimulus => "stimulus",
            Self::ParticipantStimulus => "participant:stimulus",
        };
        f.write_str(s)
    }
}

/// A grouping unit together with the column(s) identifying its levels.
///
/// The participant:stimulus unit has no column of its own; its levels are
/// the observed (participant, stimulus) pairs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupingUnit {
    pub tag: UnitKind,
    pub id_column: String,
}

/// Factor taxonomy: can `unit` carry a random interaction with a
/// factor of `kind`? A unit is only measured in several levels of factors
/// that are not features of itself.
pub fn estimable(unit: UnitKind, kind: FactorKind) -> bool {
    use FactorKind::*;
    match unit {
        UnitKind::Participant => matches!(kind, S | PS | M | O),
        UnitKind::Stimulus => matches!(kind, P | PS | M | O),
        UnitKind::ParticipantStimulus => matches!(kind, M | O),
    }
}

/// How a random term was written, which decides how it renders back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BarKind {
    /// `(1|U)` or `(1|U:A:B)`: one term, unconstrained coding.
    Single,
    /// `(1|U|expr)`: orthonormal sum-to-zero coding, shared variance per term.
    Constrained,
    /// `(expr|U)`: all of the unit's effects correlate.
    Correlated,
    /// `(expr||U)`: independent per-contrast variances.
    Independent,
}

/// One random interaction between a grouping unit and a set of factors.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RandomTerm {
    pub unit: GroupingUnit,
    /// Ordered as in the model's fixed factor list; empty for an intercept.
    pub factors: Vec<Factor>,
    pub bar: BarKind,
}

impl RandomTerm {
    pub fn intercept(unit: GroupingUnit, bar: BarKind) -> Self {
        Self { unit, factors: Vec::new(), bar }
    }

    pub fn is_intercept(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn constrained(&self) -> bool {
        self.bar == BarKind::Constrained
    }

    /// Same unit and same factor set, regardless of how it was written.
    pub fn same_effect(&self, other: &RandomTerm) -> bool {
        self.unit.tag == other.unit.tag && self.factor_names() == other.factor_names()
    }

    pub fn factor_names(&self) -> Vec<&str> {
        self.factors.iter().map(|f| f.name()).collect()
    }

    /// `PT:As:Am` style label.
    pub fn label(&self) -> String {
        let mut parts = vec![self.unit.id_column.clone()];
        parts.extend(self.factors.iter().map(|f| f.name().to_string()));
        parts.join(":")
    }
}

impl fmt::Display for RandomTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(1|{})", self.label())
    }
}

/// Declared factors plus the identifier columns of the grouping units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorTable {
    pub factors: IndexMap<String, Factor>,
    pub participant: String,
    pub stimulus: String,
    /// Optional single-identifier spelling of the participant:stimulus unit
    /// (e.g. `PTSM`); `PT:SM` is always accepted.
    pub pair_alias: Option<String>,
}

impl FactorTable {
    pub fn new(participant: impl Into<String>, stimulus: impl Into<String>) -> Self {
        Self {
            factors: IndexMap::new(),
            participant: participant.into(),
            stimulus: stimulus.into(),
            pair_alias: None,
        }
    }

    pub fn with_factor(mut self, factor: Factor) -> Self {
        self.factors.insert(factor.name().to_string(), factor);
        self
    }

    pub fn with_pair_alias(mut self, alias: impl Into<String>) -> Self {
        self.pair_alias = Some(alias.into());
        self
    }

    pub fn get(&self, name: &str) -> Option<&Factor> {
        self.factors.get(name)
    }

    pub fn unit(&self, tag: UnitKind) -> GroupingUnit {
        let id_column = match tag {
            UnitKind::Participant => self.participant.clone(),
            UnitKind::Stimulus => self.stimulus.clone(),
            UnitKind::ParticipantStimulus => self
                .pair_alias
                .clone()
                .unwrap_or_else(|| format!("{}:{}", self.participant, self.stimulus)),
        };
        GroupingUnit { tag, id_column }
    }

    /// Factor table for a plain list of factors with the conventional
    /// `PT`/`SM` unit identifiers.
    pub fn from_factors(factors: &[Factor]) -> Self {
        factors
            .iter()
            .cloned()
            .fold(Self::new("PT", "SM"), |t, f| t.with_factor(f))
    }
}

/// Parsed model: response, full-factorial fixed part and random terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub response: String,
    pub fixed_factors: Vec<Factor>,
    /// Fixed terms as sorted index sets into `fixed_factors`, intercept excluded.
    pub fixed_terms: Vec<Vec<usize>>,
    pub random_terms: Vec<RandomTerm>,
    /// Data columns identifying participants and stimuli.
    pub participant: String,
    pub stimulus: String,
}

impl ModelSpec {
    /// Builds a spec, putting random terms into canonical order and checking
    /// the estimability and duplicate invariants.
    pub fn new(
        response: impl Into<String>,
        fixed_factors: Vec<Factor>,
        mut fixed_terms: Vec<Vec<usize>>,
        random_terms: Vec<RandomTerm>,
    ) -> Result<Self, FormulaError> {
        for t in &mut fixed_terms {
            t.sort_unstable();
            t.dedup();
        }
        fixed_terms.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        fixed_terms.dedup();

        let position = |name: &str| fixed_factors.iter().position(|f| f.name() == name);
        let mut terms = Vec::with_capacity(random_terms.len());
        for mut term in random_terms {
            for f in &term.factors {
                if !estimable(term.unit.tag, f.kind()) {
                    return Err(FormulaError::Estimability {
                        term: term.label(),
                        unit: term.unit.tag,
                        kind: f.kind(),
                    });
                }
                if position(f.name()).is_none() {
                    return Err(FormulaError::RandomFactorNotFixed(f.name().to_string()));
                }
            }
            let mut seen = std::collections::HashSet::new();
            for f in &term.factors {
                if !seen.insert(f.name().to_string()) {
                    return Err(FormulaError::RepeatedFactor(f.name().to_string()));
                }
            }
            term.factors.sort_by_key(|f| position(f.name()));
            terms.push(term);
        }
        let key = |t: &RandomTerm| {
            let idx: Vec<usize> = t.factors.iter().filter_map(|f| position(f.name())).collect();
            (t.unit.tag, idx.len(), idx)
        };
        terms.sort_by_key(key);
        // A correlated or independent group holding only the intercept is
        // the plain intercept term.
        for i in 0..terms.len() {
            let (unit, bar) = (terms[i].unit.tag, terms[i].bar);
            let grouped = matches!(bar, BarKind::Correlated | BarKind::Independent);
            if grouped && !terms.iter().any(|t| t.unit.tag == unit && t.bar == bar && !t.is_intercept()) {
                terms[i].bar = BarKind::Single;
            }
        }
        for w in terms.windows(2) {
            if w[0].same_effect(&w[1]) {
                return Err(FormulaError::DuplicateTerm(w[0].label()));
            }
        }

        // The pair unit crossed with every within-pair factor is the residual
        // when each cell is observed once.
        let within_pair: Vec<&str> = fixed_factors
            .iter()
            .filter(|f| estimable(UnitKind::ParticipantStimulus, f.kind()))
            .map(|f| f.name())
            .collect();
        if !within_pair.is_empty() {
            if let Some(t) = terms.iter().find(|t| {
                t.unit.tag == UnitKind::ParticipantStimulus && t.factor_names() == within_pair
            }) {
                return Err(FormulaError::ConfoundedWithError(t.label()));
            }
        }

        Ok(Self {
            response: response.into(),
            fixed_factors,
            fixed_terms,
            random_terms: terms,
            participant: "PT".into(),
            stimulus: "SM".into(),
        })
    }

    pub fn with_unit_columns(mut self, participant: &str, stimulus: &str) -> Self {
        self.participant = participant.to_string();
        self.stimulus = stimulus.to_string();
        self
    }

    /// The same model with a different random part.
    pub fn with_random_terms(&self, terms: Vec<RandomTerm>) -> Result<Self, FormulaError> {
        Ok(Self::new(
            self.response.clone(),
            self.fixed_factors.clone(),
            self.fixed_terms.clone(),
            terms,
        )?
        .with_unit_columns(&self.participant, &self.stimulus))
    }

    /// Full-factorial fixed part over `factors`.
    pub fn full_factorial(n_factors: usize) -> Vec<Vec<usize>> {
        (1u32..(1 << n_factors))
            .map(|mask| (0..n_factors).filter(|i| mask & (1 << i) != 0).collect())
            .collect()
    }

    pub fn fixed_term_label(&self, term: &[usize]) -> String {
        term.iter()
            .map(|&i| self.fixed_factors[i].name())
            .collect::<Vec<_>>()
            .join(":")
    }

    pub fn fixed_labels(&self) -> Vec<String> {
        self.fixed_terms.iter().map(|t| self.fixed_term_label(t)).collect()
    }

    pub fn units(&self) -> Vec<UnitKind> {
        let mut u: Vec<UnitKind> = self.random_terms.iter().map(|t| t.unit.tag).collect();
        u.dedup();
        u
    }

    pub fn has_pair_unit(&self) -> bool {
        self.random_terms
            .iter()
            .any(|t| t.unit.tag == UnitKind::ParticipantStimulus)
    }

    /// Canonical formula text; reparses to an equal spec.
    pub fn render(&self) -> String {
        let fixed = if self.fixed_terms.is_empty() {
            "1".to_string()
        } else {
            self.fixed_labels().join(" + ")
        };
        let mut out = format!("{} ~ {}", self.response, fixed);

        // Grouped bars are rendered once per (unit, bar); each group owns the
        // unit intercept.
        let mut groups: IndexMap<(UnitKind, BarKind), Vec<&RandomTerm>> = IndexMap::new();
        for t in &self.random_terms {
            groups.entry((t.unit.tag, t.bar)).or_default().push(t);
        }
        for ((_, bar), terms) in groups {
            let unit = &terms[0].unit.id_column;
            let effects = || {
                terms
                    .iter()
                    .filter(|t| !t.is_intercept())
                    .map(|t| t.factor_names().join(":"))
                    .collect::<Vec<_>>()
            };
            match bar {
                BarKind::Single => {
                    for t in &terms {
                        out.push_str(&format!(" + (1|{})", t.label()));
                    }
                }
                BarKind::Constrained => {
                    let e = effects();
                    if e.is_empty() {
                        out.push_str(&format!(" + (1|{unit}|1)"));
                    } else {
                        out.push_str(&format!(" + (1|{unit}|{})", e.join(" + ")));
                    }
                }
                BarKind::Correlated | BarKind::Independent => {
                    let sep = if bar == BarKind::Correlated { "|" } else { "||" };
                    let mut e = vec!["1".to_string()];
                    e.extend(effects());
                    out.push_str(&format!(" + ({}{sep}{unit})", e.join(" + ")));
                }
            }
        }
        out
    }

    /// Spec with the saturated random part for `family`, as a user would
    /// write it for that correlation structure.
    pub fn saturated(
        response: &str,
        factors: &[Factor],
        family: crate::covariance::CovFamily,
    ) -> Result<Self, FormulaError> {
        use crate::covariance::FamilyTag;
        let table = FactorTable::from_factors(factors);
        let bar = match family.tag {
            FamilyTag::Ri | FamilyTag::RiL => BarKind::Single,
            FamilyTag::Ganova => BarKind::Constrained,
            FamilyTag::Max => BarKind::Correlated,
            FamilyTag::ZcpSum | FamilyTag::ZcpPoly => BarKind::Independent,
        };
        let terms = saturated_terms_in(&table, factors, family.include_ps)
            .into_iter()
            .filter(|t| family.tag != FamilyTag::Ri || t.is_intercept())
            .map(|mut t| {
                t.bar = bar;
                t
            })
            .collect();
        Self::new(response, factors.to_vec(), Self::full_factorial(factors.len()), terms)
    }
}

/// Every estimable random term for a design: all subsets of the factors each
/// unit is crossed with, minus the pair-unit term that coincides with the
/// residual. Uses the conventional `PT`/`SM` unit identifiers.
pub fn saturated_terms(design_factors: &[Factor], include_ps: bool) -> Vec<RandomTerm> {
    let table = FactorTable::from_factors(design_factors);
    saturated_terms_in(&table, design_factors, include_ps)
}

pub(crate) fn saturated_terms_in(
    table: &FactorTable,
    design_factors: &[Factor],
    include_ps: bool,
) -> Vec<RandomTerm> {
    let mut out = Vec::new();
    for unit in UnitKind::ALL {
        if unit == UnitKind::ParticipantStimulus && !include_ps {
            continue;
        }
        let crossed: Vec<&Factor> = design_factors
            .iter()
            .filter(|f| estimable(unit, f.kind()))
            .collect();
        let k = crossed.len();
        let mut subsets: Vec<Vec<usize>> = (0u64..(1 << k))
            .map(|mask| (0..k).filter(|i| mask & (1 << i) != 0).collect())
            .collect();
        subsets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        for s in subsets {
            if unit == UnitKind::ParticipantStimulus && s.len() == k {
                continue;
            }
            out.push(RandomTerm {
                unit: table.unit(unit),
                factors: s.iter().map(|&i| crossed[i].clone()).collect(),
                bar: BarKind::Single,
            });
        }
    }
    out
}

/// The five designs used throughout: factor lists with level counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Design {
    M1,
    M2,
    M3,
    M4,
    M5,
}

impl Design {
    pub const ALL: [Design; 5] = [Self::M1, Self::M2, Self::M3, Self::M4, Self::M5];

    pub fn factors(&self) -> Vec<Factor> {
        use FactorKind::*;
        let spec: &[(&str, FactorKind, usize)] = match self {
            Self::M1 => &[("Ap", P, 2), ("As", S, 2), ("Am", M, 2)],
            Self::M2 => &[("Ap", P, 3), ("As", S, 3), ("Am", M, 3)],
            Self::M3 => &[("Ap", P, 3), ("As", S, 3), ("Am1", M, 3), ("Am2", M, 2)],
            Self::M4 => &[("Ap", P, 3), ("As", S, 3), ("Am", M, 3), ("Aps", PS, 2)],
            Self::M5 => &[
                ("Ap", P, 3),
                ("As", S, 3),
                ("Am1", M, 3),
                ("Am2", M, 2),
                ("Aps", PS, 2),
                ("Ao", O, 2),
            ],
        };
        spec.iter()
            .map(|&(n, k, l)| Factor::new(n, k, l).expect("static design"))
            .collect()
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "M1" => Some(Self::M1),
            "M2" => Some(Self::M2),
            "M3" => Some(Self::M3),
            "M4" => Some(Self::M4),
            "M5" => Some(Self::M5),
            _ => None,
        }
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}
