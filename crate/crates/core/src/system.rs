//! States, Hamiltonians, Gibbs weights and β-ordering.
//!
//! A system is a population vector over the eigenlevels of a diagonal
//! Hamiltonian at a fixed inverse temperature. Energies are extended reals:
//! `+inf` marks a level with Gibbs weight exactly zero. Everything here is
//! immutable after construction and all operations are pure.

use crate::error::{Result, ThermoError};
use serde::{Deserialize, Serialize};

/// Normalization tolerance on construction. Inputs within this distance of
/// a unit sum are renormalized; anything further out is rejected.
pub const TOL_NORM: f64 = 1e-12;

/// Inverse temperature β = 1/kT. Always finite and positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Beta(f64);

impl Beta {
    pub fn new(beta: f64) -> Result<Self> {
        if !beta.is_finite() || beta <= 0.0 {
            return Err(ThermoError::InvalidBeta(beta));
        }
        Ok(Beta(beta))
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }

    /// kT in energy units.
    #[inline]
    pub fn kt(self) -> f64 {
        1.0 / self.0
    }
}

/// Diagonal Hamiltonian: a list of extended-real energies, at least one finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Hamiltonian {
    energies: Vec<f64>,
}

impl Hamiltonian {
    pub fn new(energies: Vec<f64>) -> Result<Self> {
        if energies.is_empty() {
            return Err(ThermoError::EmptyHamiltonian);
        }
        for (i, &e) in energies.iter().enumerate() {
            if e.is_nan() || e == f64::NEG_INFINITY {
                return Err(ThermoError::InvalidEnergy(e, i));
            }
        }
        if !energies.iter().any(|e| e.is_finite()) {
            return Err(ThermoError::AllLevelsInfinite);
        }
        Ok(Hamiltonian { energies })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.energies.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    #[inline]
    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    #[inline]
    pub fn energy(&self, i: usize) -> f64 {
        self.energies[i]
    }

    /// Gibbs weight e^{-βE_i}; exactly 0 for infinite levels.
    #[inline]
    pub fn gibbs_weight(&self, i: usize, beta: Beta) -> f64 {
        let e = self.energies[i];
        if e.is_finite() {
            (-beta.get() * e).exp()
        } else {
            0.0
        }
    }
}

/// Sum of finite Gibbs weights.
pub fn partition_function(h: &Hamiltonian, beta: Beta) -> f64 {
    (0..h.len()).map(|i| h.gibbs_weight(i, beta)).sum()
}

/// Population vector: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalState {
    populations: Vec<f64>,
}

impl DiagonalState {
    pub fn new(populations: Vec<f64>) -> Result<Self> {
        for (i, &p) in populations.iter().enumerate() {
            if !(p >= 0.0) {
                return Err(ThermoError::NegativePopulation(p, i));
            }
        }
        let total: f64 = populations.iter().sum();
        if (total - 1.0).abs() > TOL_NORM {
            return Err(ThermoError::NotNormalized(total, TOL_NORM));
        }
        let populations = if total == 1.0 {
            populations
        } else {
            populations.iter().map(|p| p / total).collect()
        };
        Ok(DiagonalState { populations })
    }

    /// Constructor for internally generated vectors: clamps float dust at
    /// zero but performs no renormalization.
    pub(crate) fn from_raw(populations: Vec<f64>) -> Self {
        let populations = populations
            .into_iter()
            .map(|p| if p < 0.0 && p > -1e-13 { 0.0 } else { p })
            .collect();
        DiagonalState { populations }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.populations.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.populations.is_empty()
    }

    #[inline]
    pub fn populations(&self) -> &[f64] {
        &self.populations
    }

    #[inline]
    pub fn population(&self, i: usize) -> f64 {
        self.populations[i]
    }
}

/// Gibbs state of `h` at inverse temperature `beta`. Infinite levels get 0.
pub fn gibbs_state(h: &Hamiltonian, beta: Beta) -> DiagonalState {
    let z = partition_function(h, beta);
    DiagonalState::from_raw((0..h.len()).map(|i| h.gibbs_weight(i, beta) / z).collect())
}

/// A state-Hamiltonian pair at a fixed inverse temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermoSystem {
    pub hamiltonian: Hamiltonian,
    pub state: DiagonalState,
    pub beta: Beta,
}

impl ThermoSystem {
    pub fn new(hamiltonian: Hamiltonian, state: DiagonalState, beta: Beta) -> Result<Self> {
        if hamiltonian.len() != state.len() {
            return Err(ThermoError::ShapeMismatch(hamiltonian.len(), state.len()));
        }
        Ok(ThermoSystem {
            hamiltonian,
            state,
            beta,
        })
    }

    /// Convenience constructor from raw parts.
    pub fn from_parts(energies: Vec<f64>, populations: Vec<f64>, beta: f64) -> Result<Self> {
        ThermoSystem::new(
            Hamiltonian::new(energies)?,
            DiagonalState::new(populations)?,
            Beta::new(beta)?,
        )
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.hamiltonian.len()
    }

    #[inline]
    pub fn weight(&self, i: usize) -> f64 {
        self.hamiltonian.gibbs_weight(i, self.beta)
    }

    #[inline]
    pub fn population(&self, i: usize) -> f64 {
        self.state.population(i)
    }

    #[inline]
    pub fn energy(&self, i: usize) -> f64 {
        self.hamiltonian.energy(i)
    }

    pub fn partition_function(&self) -> f64 {
        partition_function(&self.hamiltonian, self.beta)
    }

    /// β-ordering key η_i e^{βE_i}. An occupied infinite level keys +∞; an
    /// unoccupied infinite level keys 0 (invisible to the curve, sorted last).
    pub fn key(&self, i: usize) -> f64 {
        let e = self.hamiltonian.energy(i);
        let p = self.state.population(i);
        if e.is_finite() {
            p * (self.beta.get() * e).exp()
        } else if p > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    }

    /// True when some level holds population at infinite energy.
    pub fn is_infinitely_excited(&self) -> bool {
        (0..self.n()).any(|i| !self.energy(i).is_finite() && self.population(i) > 0.0)
    }

    /// Tensor product with `other` in row-major (self, other) index order.
    pub fn tensor(&self, other: &ThermoSystem) -> Result<ThermoSystem> {
        if (self.beta.get() - other.beta.get()).abs()
            > 1e-12 * self.beta.get().max(other.beta.get())
        {
            return Err(ThermoError::BetaMismatch(self.beta.get(), other.beta.get()));
        }
        let (na, nb) = (self.n(), other.n());
        let mut energies = Vec::with_capacity(na * nb);
        let mut pops = Vec::with_capacity(na * nb);
        for i in 0..na {
            for j in 0..nb {
                energies.push(self.energy(i) + other.energy(j));
                pops.push(self.population(i) * other.population(j));
            }
        }
        Ok(ThermoSystem {
            hamiltonian: Hamiltonian::new(energies)?,
            state: DiagonalState::from_raw(pops),
            beta: self.beta,
        })
    }

    /// Same levels, new populations (lengths must match).
    pub fn with_populations(&self, populations: DiagonalState) -> Result<ThermoSystem> {
        ThermoSystem::new(self.hamiltonian.clone(), populations, self.beta)
    }
}

/// β-ordering permutation: `perm[m]` is the original index of the level at
/// ordered position `m`. Keys are non-increasing along the permutation; ties
/// break by ascending original index (stable sort).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BetaOrdering {
    perm: Vec<usize>,
}

impl BetaOrdering {
    #[inline]
    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    #[inline]
    pub fn at(&self, position: usize) -> usize {
        self.perm[position]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.perm.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }
}

/// The tie-broken β-ordering of a system.
pub fn beta_order(s: &ThermoSystem) -> BetaOrdering {
    let mut perm: Vec<usize> = (0..s.n()).collect();
    // Stable descending sort on the key; stability provides the tie rule.
    perm.sort_by(|&a, &b| s.key(b).partial_cmp(&s.key(a)).unwrap());
    BetaOrdering { perm }
}

// ---------------------------------------------------------------------------
// JSON wire format
// ---------------------------------------------------------------------------

/// Extended-real JSON encoding: numbers stay numbers, infinities become the
/// strings "inf" / "-inf".
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExtRealJson {
    Num(f64),
    Word(String),
}

pub fn ext_to_json(x: f64) -> ExtRealJson {
    if x == f64::INFINITY {
        ExtRealJson::Word("inf".to_string())
    } else if x == f64::NEG_INFINITY {
        ExtRealJson::Word("-inf".to_string())
    } else {
        ExtRealJson::Num(x)
    }
}

pub fn ext_from_json(v: &ExtRealJson) -> Result<f64> {
    match v {
        ExtRealJson::Num(x) => Ok(*x),
        ExtRealJson::Word(w) => match w.as_str() {
            "inf" | "+inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            other => Err(ThermoError::Json(format!(
                "expected a number, \"inf\" or \"-inf\", got \"{other}\""
            ))),
        },
    }
}

#[derive(Serialize, Deserialize)]
struct SystemJson {
    beta: f64,
    energies: Vec<ExtRealJson>,
    populations: Vec<f64>,
}

impl ThermoSystem {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(SystemJson {
            beta: self.beta.get(),
            energies: self.hamiltonian.energies().iter().map(|&e| ext_to_json(e)).collect(),
            populations: self.state.populations().to_vec(),
        })
        .expect("system serialization cannot fail")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let raw: SystemJson =
            serde_json::from_value(v.clone()).map_err(|e| ThermoError::Json(e.to_string()))?;
        let energies = raw
            .energies
            .iter()
            .map(ext_from_json)
            .collect::<Result<Vec<_>>>()?;
        ThermoSystem::from_parts(energies, raw.populations, raw.beta)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let v: serde_json::Value =
            serde_json::from_str(s).map_err(|e| ThermoError::Json(e.to_string()))?;
        ThermoSystem::from_json(&v)
    }
}
