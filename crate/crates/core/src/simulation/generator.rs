//! Synthetic crossed datasets with random effects drawn in the orthonormal
//! coded space of every estimable term.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::covariance::{realize, CovFamily, FamilyTag};
use crate::data::Dataset;
use crate::design::{build_design, fixed_design};
use crate::formula::{Design, FactorKind, ModelSpec, UnitKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RePattern {
    /// Independent effects, one sd per term.
    Spherical,
    /// Per unit, effects spanning half of the unit's dimensions in random
    /// directions.
    Correlated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub design: Design,
    pub n_participants: usize,
    pub n_stimuli: usize,
    pub re_pattern: RePattern,
    pub include_ps_effects: bool,
    /// Random intercepts of every unit; off gives data whose intercept
    /// variances are zero.
    pub random_intercepts: bool,
    /// Sd of the intercepts and of the residuals.
    pub base_sd: f64,
    /// Factor applied to the sd per interaction order.
    pub interaction_decay: f64,
    pub stimulus_shrink: f64,
    pub ps_shrink: f64,
    /// Fraction of `effect_size` given to the fixed effects; 0 is the null.
    pub effect_scale: f64,
    /// Value of every non-intercept fixed coefficient at `effect_scale = 1`.
    pub effect_size: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            design: Design::M1,
            n_participants: 12,
            n_stimuli: 12,
            re_pattern: RePattern::Spherical,
            include_ps_effects: true,
            random_intercepts: true,
            base_sd: 1.0,
            interaction_decay: 0.5,
            stimulus_shrink: 0.9,
            ps_shrink: 0.8,
            effect_scale: 0.0,
            effect_size: 0.2,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if !matches!(self.design, Design::M1 | Design::M2 | Design::M4) {
            return bad(format!("design {} cannot be simulated", self.design));
        }
        for (name, v) in [
            ("interaction_decay", self.interaction_decay),
            ("stimulus_shrink", self.stimulus_shrink),
            ("ps_shrink", self.ps_shrink),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("{name} must lie in (0, 1]"));
            }
        }
        if !(self.base_sd >= 0.0 && self.base_sd.is_finite()) {
            return bad("base_sd must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.effect_scale) || !self.effect_size.is_finite() {
            return bad("effect_scale must lie in [0, 1]".into());
        }
        for f in self.design.factors() {
            let (n, unit) = match f.kind() {
                FactorKind::P => (self.n_participants, "participants"),
                FactorKind::S => (self.n_stimuli, "stimuli"),
                FactorKind::PS if f.n_levels() % 2 != 0 => {
                    return bad(format!("{} needs an even level count", f.name()))
                }
                FactorKind::PS => (self.n_participants, "participants"),
                _ => continue,
            };
            let groups = if f.kind() == FactorKind::PS { 2 * self.design_ap_levels() } else { f.n_levels() };
            if n == 0 || n % groups != 0 {
                return bad(format!("{unit} must be a positive multiple of {groups} for {}", f.name()));
            }
        }
        if self.n_participants < 2 || self.n_stimuli < 2 {
            return bad("need at least two participants and two stimuli".into());
        }
        Ok(())
    }

    fn design_ap_levels(&self) -> usize {
        self.design
            .factors()
            .iter()
            .find(|f| f.kind() == FactorKind::P)
            .map_or(1, |f| f.n_levels())
    }

    /// The saturated model used for generation.
    pub fn spec(&self) -> Result<ModelSpec, SimError> {
        let fam = CovFamily::new(FamilyTag::Ganova, self.include_ps_effects);
        Ok(ModelSpec::saturated("y", &self.design.factors(), fam)?)
    }
}

/// Realized random effects of one unit: one row per group, one column per
/// coded random-effect dimension.
#[derive(Debug, Clone)]
pub struct UnitEffects {
    pub unit: UnitKind,
    /// Term label and its columns.
    pub terms: Vec<(String, std::ops::Range<usize>)>,
    pub values: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub data: Dataset,
    pub effects: Vec<UnitEffects>,
}

/// Full crossing of participants, stimuli and within factors; between
/// factors cycle over the participants or stimuli, and a pair factor
/// splits each between-participant group in two halves whose assignment
/// alternates with the stimulus index.
fn layout(config: &GenConfig) -> Result<Dataset, SimError> {
    let factors = config.design.factors();
    let within: Vec<usize> = factors
        .iter()
        .filter(|f| matches!(f.kind(), FactorKind::M | FactorKind::O))
        .map(|f| f.n_levels())
        .collect();
    let n_within: usize = within.iter().product();
    let ap = config.design_ap_levels();
    let (np, ns) = (config.n_participants, config.n_stimuli);
    let n = np * ns * n_within;
    let mut cols: Vec<Vec<usize>> = vec![Vec::with_capacity(n); factors.len()];
    let (mut pt, mut sm) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for p in 0..np {
        for s in 0..ns {
            for w in 0..n_within {
                pt.push(p);
                sm.push(s);
                let mut rest = w;
                let mut wi = within.len();
                let mut wcodes = vec![0; within.len()];
                while wi > 0 {
                    wi -= 1;
                    wcodes[wi] = rest % within[wi];
                    rest /= within[wi];
                }
                let mut k = 0;
                for (c, f) in cols.iter_mut().zip(&factors) {
                    c.push(match f.kind() {
                        FactorKind::P => p % f.n_levels(),
                        FactorKind::S => s % f.n_levels(),
                        FactorKind::PS => {
                            let half = (p / ap) % 2;
                            let block = f.n_levels() / 2;
                            (half * block + s) % f.n_levels()
                        }
                        FactorKind::M | FactorKind::O => {
                            k += 1;
                            wcodes[k - 1]
                        }
                    });
                }
            }
        }
    }
    let mut d = Dataset::new();
    d.add_real("y", vec![0.0; n])?;
    d.add_indexed("PT", np, pt)?;
    d.add_indexed("SM", ns, sm)?;
    for (c, f) in cols.into_iter().zip(&factors) {
        d.add_indexed(f.name(), f.n_levels(), c)?;
    }
    Ok(d)
}

/// Haar-distributed orthogonal matrix.
fn random_rotation(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Stream reserved for the study-wide rotations.
const ROTATION_STREAM: u64 = u64::MAX;

/// Dataset of one replicate; all randomness comes from `config.seed` and
/// `replicate`.
pub fn generate_replicate(config: &GenConfig, replicate: u64) -> Result<Generated, SimError> {
    config.validate()?;
    let spec = config.spec()?;
    let structure = realize(&spec, CovFamily::new(FamilyTag::Ganova, config.include_ps_effects))?;
    let mut data = layout(config)?;
    let design = build_design(&spec, &data, &structure)?;
    let (x, _, _) = fixed_design(&spec, &data)?;

    let mut rot_rng = ChaCha8Rng::seed_from_u64(config.seed);
    rot_rng.set_stream(ROTATION_STREAM);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(replicate);

    let mut beta = DVector::from_element(x.ncols(), config.effect_scale * config.effect_size);
    beta[0] = 0.0;
    let mut y = &x * beta;

    let mut effects = Vec::new();
    for u in &design.units {
        let shrink = match u.unit {
            UnitKind::Participant => 1.0,
            UnitKind::Stimulus => config.stimulus_shrink,
            UnitKind::ParticipantStimulus => config.ps_shrink,
        };
        let mut sd = DVector::zeros(u.dim);
        for (t, r) in &u.terms {
            let v = if t.is_intercept() && !config.random_intercepts {
                0.0
            } else {
                config.base_sd * config.interaction_decay.powi(t.order() as i32) * shrink
            };
            sd.rows_mut(r.start, r.len()).fill(v);
        }
        // Columns map independent normals to effects: diag(sd)·R·D^½.
        let map = match config.re_pattern {
            RePattern::Spherical => DMatrix::from_diagonal(&sd),
            RePattern::Correlated => {
                let d = u.dim;
                let rank = d.div_ceil(2);
                let scale = (d as f64 / rank as f64).sqrt();
                let r = random_rotation(d, &mut rot_rng);
                DMatrix::from_diagonal(&sd) * r.columns(0, rank) * scale
            }
        };
        let k = map.ncols();
        let mut values = DMatrix::zeros(u.n_groups, u.dim);
        for g in 0..u.n_groups {
            let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
            values.row_mut(g).copy_from(&(&map * z).transpose());
        }
        for i in 0..y.len() {
            y[i] += u.values.row(i).dot(&values.row(u.group[i]));
        }
        effects.push(UnitEffects {
            unit: u.unit,
            terms: u.terms.iter().map(|(t, r)| (t.label(), r.clone())).collect(),
            values,
        });
    }
    for v in y.iter_mut() {
        *v += config.base_sd * rng.sample::<f64, _>(StandardNormal);
    }
    data.replace_real("y", y.iter().copied().collect())?;
    Ok(Generated { data, effects })
}

/// Dataset of replicate 0.
pub fn generate(config: &GenConfig) -> Result<Dataset, SimError> {
    Ok(generate_replicate(config, 0)?.data)
}
