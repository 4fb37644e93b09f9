//! Finite point measures on `R^d` and the distances used to compare them.
//!
//! A population of individuals is encoded as a finite sum of Dirac masses
//! `ζ = Σ m_i δ_{x_i}`. Atoms are stored in lexicographic order of their
//! locations and atoms whose locations agree up to a relative tolerance of
//! `1e-12` are merged, so two measures built from permuted atom lists have the
//! same representation.
//!
//! The vague distance is evaluated against a finite, user supplied family of
//! test functions. With a finite family it is only a pseudo-distance: two
//! measures that differ outside the supports of every test function are at
//! distance zero.

use std::cmp::Ordering;
use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Relative tolerance under which two atom locations are considered equal.
pub const LOCATION_REL_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("atom multiplicity must be a positive integer, got {0}")]
    InvalidMultiplicity(f64),
    #[error("atom location has non-finite coordinate {0}")]
    NonFiniteLocation(f64),
    #[error("atoms have mismatched dimensions {expected} and {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("atom record is empty")]
    EmptyRecord,
    #[error("atom location must have at least one coordinate")]
    ZeroDimension,
    #[error("atom index {index} out of range for a measure with {len} atoms")]
    AtomOutOfRange { index: usize, len: usize },
    #[error("test-function basis must contain at least one function")]
    EmptyBasis,
}

/// A Dirac atom `m δ_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    location: Vec<f64>,
    multiplicity: u32,
}

impl Atom {
    pub fn location(&self) -> &[f64] {
        &self.location
    }

    pub fn multiplicity(&self) -> u32 {
        self.multiplicity
    }
}

fn coordinates_close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= LOCATION_REL_TOL * a.abs().max(b.abs())
}

fn locations_close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(&x, &y)| coordinates_close(x, y))
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    a.len().cmp(&b.len())
}

/// A finite point measure `Σ m_i δ_{x_i}` in canonical form.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointMeasure {
    atoms: Vec<Atom>,
}

impl PointMeasure {
    /// The zero measure.
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds a measure from `(location, multiplicity)` pairs, sorting and
    /// merging coincident locations.
    pub fn new<I>(atoms: I) -> Result<Self, MeasureError>
    where
        I: IntoIterator<Item = (Vec<f64>, u32)>,
    {
        let mut collected = Vec::new();
        let mut dim: Option<usize> = None;
        for (location, multiplicity) in atoms {
            if multiplicity == 0 {
                return Err(MeasureError::InvalidMultiplicity(0.0));
            }
            if location.is_empty() {
                return Err(MeasureError::ZeroDimension);
            }
            if let Some(&bad) = location.iter().find(|c| !c.is_finite()) {
                return Err(MeasureError::NonFiniteLocation(bad));
            }
            match dim {
                None => dim = Some(location.len()),
                Some(d) if d != location.len() => {
                    return Err(MeasureError::DimensionMismatch {
                        expected: d,
                        found: location.len(),
                    })
                }
                _ => {}
            }
            collected.push(Atom {
                location,
                multiplicity,
            });
        }
        Ok(Self::canonicalize(collected))
    }

    /// One unit atom per point.
    pub fn from_points<I>(points: I) -> Result<Self, MeasureError>
    where
        I: IntoIterator<Item = Vec<f64>>,
    {
        Self::new(points.into_iter().map(|p| (p, 1)))
    }

    /// `δ_x`.
    pub fn dirac(location: Vec<f64>) -> Result<Self, MeasureError> {
        Self::new([(location, 1)])
    }

    fn canonicalize(mut atoms: Vec<Atom>) -> Self {
        atoms.sort_by(|a, b| lexicographic(&a.location, &b.location));
        let mut merged: Vec<Atom> = Vec::with_capacity(atoms.len());
        for atom in atoms {
            match merged.last_mut() {
                Some(last) if locations_close(&last.location, &atom.location) => {
                    last.multiplicity += atom.multiplicity;
                }
                _ => merged.push(atom),
            }
        }
        Self { atoms: merged }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Number of distinct atom locations.
    pub fn support_size(&self) -> usize {
        self.atoms.len()
    }

    /// Total mass `ζ(R^d)`, i.e. the number of individuals.
    pub fn total_mass(&self) -> u64 {
        self.atoms.iter().map(|a| u64::from(a.multiplicity)).sum()
    }

    pub fn dimension(&self) -> Option<usize> {
        self.atoms.first().map(|a| a.location.len())
    }

    /// `μ f = Σ m_i f(x_i)`.
    pub fn integrate<F>(&self, f: F) -> f64
    where
        F: Fn(&[f64]) -> f64,
    {
        self.atoms
            .iter()
            .map(|a| f64::from(a.multiplicity) * f(&a.location))
            .sum()
    }

    /// Image measure under a location map. The map must keep the dimension.
    pub fn map_locations<F>(&self, f: F) -> Self
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        Self::canonicalize(
            self.atoms
                .iter()
                .map(|a| Atom {
                    location: f(&a.location),
                    multiplicity: a.multiplicity,
                })
                .collect(),
        )
    }

    /// `μ + ν`.
    pub fn add(&self, other: &Self) -> Result<Self, MeasureError> {
        if let (Some(a), Some(b)) = (self.dimension(), other.dimension()) {
            if a != b {
                return Err(MeasureError::DimensionMismatch {
                    expected: a,
                    found: b,
                });
            }
        }
        Ok(Self::canonicalize(
            self.atoms.iter().chain(other.atoms.iter()).cloned().collect(),
        ))
    }

    /// Removes one unit of mass from the atom at `index` and adds
    /// `copies` unit atoms at `replacement`.
    pub fn replace_one(
        &self,
        index: usize,
        replacement: Vec<f64>,
        copies: u32,
    ) -> Result<Self, MeasureError> {
        let len = self.atoms.len();
        let target = self
            .atoms
            .get(index)
            .ok_or(MeasureError::AtomOutOfRange { index, len })?;
        if replacement.len() != target.location.len() {
            return Err(MeasureError::DimensionMismatch {
                expected: target.location.len(),
                found: replacement.len(),
            });
        }
        let mut atoms = self.atoms.clone();
        if atoms[index].multiplicity == 1 {
            atoms.remove(index);
        } else {
            atoms[index].multiplicity -= 1;
        }
        if copies > 0 {
            atoms.push(Atom {
                location: replacement,
                multiplicity: copies,
            });
        }
        Ok(Self::canonicalize(atoms))
    }

    /// Canonical textual key with locations rounded to 12 significant digits.
    pub fn canonical_key(&self) -> String {
        let mut key = String::new();
        for atom in &self.atoms {
            key.push('[');
            for (i, c) in atom.location.iter().enumerate() {
                if i > 0 {
                    key.push(',');
                }
                key.push_str(&format!("{c:.11e}"));
            }
            key.push_str(&format!(";{}]", atom.multiplicity));
        }
        key
    }
}

impl fmt::Display for PointMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.atoms.is_empty() {
            return write!(f, "0");
        }
        for (i, atom) in self.atoms.iter().enumerate() {
            if i > 0 {
                write!(f, " + ")?;
            }
            if atom.multiplicity != 1 {
                write!(f, "{}", atom.multiplicity)?;
            }
            write!(f, "δ(")?;
            for (k, c) in atom.location.iter().enumerate() {
                if k > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{c}")?;
            }
            write!(f, ")")?;
        }
        Ok(())
    }
}

// Wire format: a JSON array of `[x_1, ..., x_d, multiplicity]` records.
impl Serialize for PointMeasure {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let records: Vec<Vec<f64>> = self
            .atoms
            .iter()
            .map(|a| {
                let mut r = a.location.clone();
                r.push(f64::from(a.multiplicity));
                r
            })
            .collect();
        records.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PointMeasure {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let records = Vec::<Vec<f64>>::deserialize(deserializer)?;
        let mut atoms = Vec::with_capacity(records.len());
        for mut record in records {
            let m = record.pop().ok_or_else(|| D::Error::custom(MeasureError::EmptyRecord))?;
            if !(m >= 1.0 && m.fract() == 0.0 && m <= f64::from(u32::MAX)) {
                return Err(D::Error::custom(MeasureError::InvalidMultiplicity(m)));
            }
            atoms.push((record, m as u32));
        }
        PointMeasure::new(atoms).map_err(D::Error::custom)
    }
}

/// Identifier of a discrete mode (regime).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mode(pub u32);

/// A point `(v, ζ)` of the hybrid state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridState {
    pub mode: Mode,
    pub measure: PointMeasure,
}

impl HybridState {
    pub fn new(mode: Mode, measure: PointMeasure) -> Self {
        Self { mode, measure }
    }

    pub fn canonical_key(&self) -> String {
        format!("{}|{}", self.mode.0, self.measure.canonical_key())
    }
}

impl fmt::Display for HybridState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.mode.0, self.measure)
    }
}

type TestFn = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A finite family `f_1, ..., f_m` of test functions, weighted by `2^{-k}`.
///
/// Each function is expected to be continuous, compactly supported and
/// bounded by one in absolute value.
pub struct TestFunctionBasis {
    functions: Vec<TestFn>,
}

impl TestFunctionBasis {
    pub fn new(functions: Vec<TestFn>) -> Result<Self, MeasureError> {
        if functions.is_empty() {
            return Err(MeasureError::EmptyBasis);
        }
        Ok(Self { functions })
    }

    /// Product tent functions on dyadic grids over the box `[lower, upper]^d`,
    /// for levels `0..levels`. Level `j` has nodes spaced `(upper-lower)/2^j`
    /// with tent half-width equal to the spacing.
    pub fn dyadic_tents(dim: usize, lower: f64, upper: f64, levels: u32) -> Result<Self, MeasureError> {
        if dim == 0 {
            return Err(MeasureError::ZeroDimension);
        }
        let mut functions: Vec<TestFn> = Vec::new();
        for level in 0..levels {
            let cells = 1usize << level;
            let width = (upper - lower) / cells as f64;
            let per_axis = cells + 1;
            let count = per_axis.pow(dim as u32);
            for flat in 0..count {
                let mut rest = flat;
                let mut centre = Vec::with_capacity(dim);
                for _ in 0..dim {
                    centre.push(lower + (rest % per_axis) as f64 * width);
                    rest /= per_axis;
                }
                functions.push(Box::new(move |x: &[f64]| {
                    x.iter()
                        .zip(&centre)
                        .map(|(xi, ci)| (1.0 - (xi - ci).abs() / width).max(0.0))
                        .product()
                }));
            }
        }
        Self::new(functions)
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    fn weighted(&self) -> impl Iterator<Item = (f64, &TestFn)> {
        self.functions
            .iter()
            .enumerate()
            .map(|(k, f)| (0.5f64.powi(k as i32 + 1), f))
    }
}

impl fmt::Debug for TestFunctionBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunctionBasis")
            .field("len", &self.functions.len())
            .finish()
    }
}

/// `Σ_k 2^{-k} (1 - exp(-|μ f_k - ν f_k|))`, a value in `[0, 1)`.
pub fn vague_distance(mu: &PointMeasure, nu: &PointMeasure, basis: &TestFunctionBasis) -> f64 {
    basis
        .weighted()
        .map(|(w, f)| {
            let gap = (mu.integrate(f) - nu.integrate(f)).abs();
            w * -(-gap).exp_m1()
        })
        .sum()
}

/// Distance on the hybrid space: `1` across modes, `(2/π) atan(ρ)` within a mode.
pub fn hybrid_distance(x: &HybridState, y: &HybridState, basis: &TestFunctionBasis) -> f64 {
    if x.mode != y.mode {
        return 1.0;
    }
    std::f64::consts::FRAC_2_PI * vague_distance(&x.measure, &y.measure, basis).atan()
}
