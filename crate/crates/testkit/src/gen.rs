//! Seeded synthetic datasets.

use cremem::covariance::{CovFamily, FamilyTag};
use cremem::data::Dataset;
use cremem::formula::{Factor, FactorKind, ModelSpec};
use cremem::reml::FitProblem;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::oracle::helmert;

/// A small crossed problem with a saturated random part and a θ inside the
/// bounds.
pub struct RandomProblem {
    pub data: Dataset,
    pub spec: ModelSpec,
    pub family: CovFamily,
    pub problem: FitProblem,
    pub theta: Vec<f64>,
}

/// The twelve family and pair-unit combinations, cycled by `index`.
pub fn family_for(index: usize) -> CovFamily {
    let tag = FamilyTag::ALL[index % FamilyTag::ALL.len()];
    CovFamily::new(tag, (index / FamilyTag::ALL.len()) % 2 == 1)
}

/// Random crossed participant × stimulus data with at most 200 rows: `Am`
/// with 2 or 3 levels, optionally `Ap` and `As`, some cells missing.
pub fn random_problem(index: usize, seed: u64) -> RandomProblem {
    let family = family_for(index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let levels = rng.gen_range(2..=3);
        let with_ap = rng.gen_bool(0.5);
        let with_as = rng.gen_bool(0.5);
        let mut np = rng.gen_range(4..=8);
        let ns = rng.gen_range(3..=6);
        while np * ns * levels > 200 {
            np -= 1;
        }
        let drop = rng.gen_range(0.0..0.25);

        let mut factors = Vec::new();
        if with_ap {
            factors.push(Factor::new("Ap", FactorKind::P, 2).expect("valid"));
        }
        if with_as {
            factors.push(Factor::new("As", FactorKind::S, 2).expect("valid"));
        }
        factors.push(Factor::new("Am", FactorKind::M, levels).expect("valid"));

        let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
        let pe: Vec<f64> = (0..np).map(|_| normal(&mut rng)).collect();
        let se: Vec<f64> = (0..ns).map(|_| 0.7 * normal(&mut rng)).collect();
        let slope: Vec<f64> = (0..np * levels).map(|_| 0.5 * normal(&mut rng)).collect();
        let (mut pt, mut sm, mut am, mut y) = (vec![], vec![], vec![], vec![]);
        for p in 0..np {
            for s in 0..ns {
                for a in 0..levels {
                    if rng.gen::<f64>() < drop {
                        continue;
                    }
                    pt.push(p);
                    sm.push(s);
                    am.push(a);
                    y.push(0.3 * a as f64 + pe[p] + se[s] + slope[p * levels + a] + normal(&mut rng));
                }
            }
        }
        let mut data = Dataset::new();
        data.add_real("y", y).expect("fresh column");
        if with_ap {
            data.add_indexed("Ap", 2, pt.iter().map(|p| p % 2).collect()).expect("fresh column");
        }
        if with_as {
            data.add_indexed("As", 2, sm.iter().map(|s| s % 2).collect()).expect("fresh column");
        }
        data.add_indexed("Am", levels, am).expect("fresh column");
        data.add_indexed("PT", np, pt).expect("fresh column");
        data.add_indexed("SM", ns, sm).expect("fresh column");

        let spec = ModelSpec::saturated("y", &factors, family).expect("saturated spec");
        let Ok(problem) = FitProblem::from_family(&spec, &data, family) else { continue };
        let theta = problem
            .structure
            .lower_bounds()
            .iter()
            .map(|&l| if l == 0.0 { rng.gen_range(0.0..1.5) } else { rng.gen_range(-0.8..0.8) })
            .collect();
        return RandomProblem { data, spec, family, problem, theta };
    }
}

/// Participants crossed with one within factor `Am`, optionally with
/// stimuli crossed too, generated on the gANOVA scale: participant
/// intercepts with sd `sd_i`, participant-by-`Am` effects `C w_p` with
/// orthonormal zero-sum `C` and `w_p ~ N(0, sd_f² I)`.
#[derive(Debug, Clone, Copy)]
pub struct OneFactor {
    pub np: usize,
    pub levels: usize,
    /// Observations per participant × level cell (per stimulus when crossed).
    pub reps: usize,
    /// Stimuli crossed with participants and `Am`; 0 for none.
    pub ns: usize,
    pub sd_i: f64,
    pub sd_f: f64,
    pub sd_s: f64,
    pub sd_e: f64,
    /// Linear trend of the fixed effect over the levels.
    pub effect: f64,
}

impl Default for OneFactor {
    fn default() -> Self {
        Self { np: 12, levels: 3, reps: 2, ns: 0, sd_i: 1.0, sd_f: 0.7, sd_s: 0.0, sd_e: 1.0, effect: 0.3 }
    }
}

pub fn one_factor(cfg: &OneFactor, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let c = helmert(cfg.levels);
    let stimuli = cfg.ns.max(1);
    let se: Vec<f64> = (0..stimuli).map(|_| cfg.sd_s * normal()).collect();
    let (mut pt, mut sm, mut am, mut y) = (vec![], vec![], vec![], vec![]);
    for p in 0..cfg.np {
        let u = cfg.sd_i * normal();
        let w: Vec<f64> = (0..cfg.levels - 1).map(|_| cfg.sd_f * normal()).collect();
        for s in 0..stimuli {
            for a in 0..cfg.levels {
                let inter: f64 = (0..cfg.levels - 1).map(|j| c[(a, j)] * w[j]).sum();
                for _ in 0..cfg.reps {
                    pt.push(p);
                    sm.push(s);
                    am.push(a);
                    y.push(cfg.effect * a as f64 + u + inter + se[s] + cfg.sd_e * normal());
                }
            }
        }
    }
    let mut d = Dataset::new();
    d.add_real("y", y).expect("fresh column");
    d.add_indexed("PT", cfg.np, pt).expect("fresh column");
    if cfg.ns > 0 {
        d.add_indexed("SM", cfg.ns, sm).expect("fresh column");
    }
    d.add_indexed("Am", cfg.levels, am).expect("fresh column");
    d
}

/// `data` with its rows in a random order.
pub fn shuffled(data: &Dataset, seed: u64) -> Dataset {
    let mut rows: Vec<usize> = (0..data.n_obs()).collect();
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    data.select_rows(&rows)
}
