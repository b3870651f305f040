//! Exact Fock-state evolution through linear-optical mode unitaries.
//!
//! Transition amplitudes are matrix permanents of submatrices of the mode
//! unitary. For an input occupation `s` and output occupation `t` the
//! submatrix repeats column `i` `s[i]` times and row `j` `t[j]` times, and
//! the amplitude is `Per(U_sub) / sqrt(prod s! * prod t!)`.
//!
//! Partial distinguishability of photon pairs is a convex mixture of the
//! fully indistinguishable (permanent) and fully distinguishable (classical
//! routing) outcome distributions, weighted by a scalar overlap.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{Complex, DMatrix};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{domain, Error, Result};

pub type C64 = Complex<f64>;

/// Tolerance used when checking unitarity on construction.
pub const UNITARITY_TOL: f64 = 1e-12;

/// Largest photon number `output_distribution` will enumerate.
pub const MAX_PHOTONS: u32 = 4;
/// Largest mode count `output_distribution` will enumerate.
pub const MAX_MODES: usize = 8;

/// Occupation numbers over `m` optical modes.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct FockState(Vec<u32>);

impl FockState {
    pub fn new(occupations: Vec<u32>) -> Result<Self> {
        if occupations.is_empty() {
            return domain("a Fock state needs at least one mode");
        }
        Ok(FockState(occupations))
    }

    /// Vacuum over `modes` modes.
    pub fn vacuum(modes: usize) -> Result<Self> {
        Self::new(vec![0; modes])
    }

    /// One photon in each of the listed modes (repeats add photons).
    pub fn from_modes(modes: usize, occupied: &[usize]) -> Result<Self> {
        let mut occ = vec![0; modes];
        for &k in occupied {
            if k >= modes {
                return domain(format!("mode {k} out of range for {modes} modes"));
            }
            occ[k] += 1;
        }
        Self::new(occ)
    }

    pub fn occupations(&self) -> &[u32] {
        &self.0
    }

    pub fn modes(&self) -> usize {
        self.0.len()
    }

    pub fn photon_count(&self) -> u32 {
        self.0.iter().sum()
    }

    /// Mode index of each photon, in mode order, with repeats.
    pub fn photon_modes(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .flat_map(|(k, &n)| std::iter::repeat_n(k, n as usize))
            .collect()
    }

    fn factorial_product(&self) -> f64 {
        self.0.iter().map(|&n| factorial(n)).product()
    }
}

impl TryFrom<Vec<u32>> for FockState {
    type Error = Error;
    fn try_from(v: Vec<u32>) -> Result<Self> {
        FockState::new(v)
    }
}

impl From<FockState> for Vec<u32> {
    fn from(s: FockState) -> Self {
        s.0
    }
}

impl fmt::Display for FockState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "|")?;
        for (k, n) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{n}")?;
        }
        write!(f, "⟩")
    }
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

/// An `m × m` unitary acting on mode creation operators.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeUnitary {
    matrix: DMatrix<C64>,
}

impl ModeUnitary {
    /// Wraps `matrix`, rejecting anything that is not square and unitary
    /// within [`UNITARITY_TOL`].
    pub fn new(matrix: DMatrix<C64>) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return domain(format!(
                "mode unitary must be square and non-empty, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            ));
        }
        let dev = unitarity_deviation(&matrix);
        if !(dev <= UNITARITY_TOL) {
            return domain(format!("matrix is not unitary (max |UU†-I| = {dev:e})"));
        }
        Ok(ModeUnitary { matrix })
    }

    pub fn identity(modes: usize) -> Self {
        ModeUnitary {
            matrix: DMatrix::identity(modes, modes),
        }
    }

    pub fn modes(&self) -> usize {
        self.matrix.nrows()
    }

    /// Entry `(out, inp)`: amplitude for a photon entering `inp` to leave in `out`.
    pub fn get(&self, out: usize, inp: usize) -> C64 {
        self.matrix[(out, inp)]
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }

    pub fn adjoint(&self) -> Self {
        ModeUnitary {
            matrix: self.matrix.adjoint(),
        }
    }

    /// `self · other`, i.e. `other` is applied first.
    pub fn then_after(&self, other: &ModeUnitary) -> Result<Self> {
        if self.modes() != other.modes() {
            return domain("mode count mismatch in unitary product");
        }
        ModeUnitary::new(&self.matrix * &other.matrix)
    }

    /// Probability that a single photon entering `inp` exits in `out`.
    pub fn single_photon_prob(&self, out: usize, inp: usize) -> f64 {
        self.matrix[(out, inp)].norm_sqr()
    }

    pub fn unitarity_deviation(&self) -> f64 {
        unitarity_deviation(&self.matrix)
    }
}

fn unitarity_deviation(m: &DMatrix<C64>) -> f64 {
    let prod = m * m.adjoint();
    let n = m.nrows();
    let mut worst = 0.0f64;
    for r in 0..n {
        for c in 0..n {
            let target = if r == c { 1.0 } else { 0.0 };
            let d = (prod[(r, c)] - C64::new(target, 0.0)).norm();
            if d.is_nan() {
                return f64::NAN;
            }
            worst = worst.max(d);
        }
    }
    worst
}

// Row-major `[[[re, im], ...], ...]`.
impl Serialize for ModeUnitary {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let n = self.modes();
        let rows: Vec<Vec<[f64; 2]>> = (0..n)
            .map(|r| {
                (0..n)
                    .map(|c| [self.matrix[(r, c)].re, self.matrix[(r, c)].im])
                    .collect()
            })
            .collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ModeUnitary {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows: Vec<Vec<[f64; 2]>> = Vec::deserialize(d)?;
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(D::Error::custom("unitary rows must form a square matrix"));
        }
        let m = DMatrix::from_fn(n, n, |r, c| C64::new(rows[r][c][0], rows[r][c][1]));
        ModeUnitary::new(m).map_err(D::Error::custom)
    }
}

/// Directional coupler with power reflectivity `reflectivity`, symmetric convention:
/// `[[√R, i√(1−R)], [i√(1−R), √R]]`.
pub fn coupler_unitary(reflectivity: f64) -> Result<ModeUnitary> {
    if !(0.0..=1.0).contains(&reflectivity) {
        return domain(format!("reflectivity {reflectivity} outside [0, 1]"));
    }
    let r = C64::new(reflectivity.sqrt(), 0.0);
    let t = C64::new(0.0, (1.0 - reflectivity).sqrt());
    Ok(ModeUnitary {
        matrix: DMatrix::from_row_slice(2, 2, &[r, t, t, r]),
    })
}

/// Phase shift `phi` on one mode of an `modes`-mode system.
pub fn phase_unitary(modes: usize, mode: usize, phi: f64) -> Result<ModeUnitary> {
    if mode >= modes {
        return domain(format!("phase mode {mode} out of range for {modes} modes"));
    }
    let mut m = DMatrix::identity(modes, modes);
    m[(mode, mode)] = C64::from_polar(1.0, phi);
    Ok(ModeUnitary { matrix: m })
}

/// Embeds `local` on the listed modes and returns `Embed(local) · global`.
pub fn compose_on_modes(
    global: &ModeUnitary,
    local: &ModeUnitary,
    modes: &[usize],
) -> Result<ModeUnitary> {
    let m = global.modes();
    let k = local.modes();
    if modes.len() != k {
        return domain(format!(
            "{} mode indices given for a {k}-mode element",
            modes.len()
        ));
    }
    for (i, &a) in modes.iter().enumerate() {
        if a >= m {
            return domain(format!("mode {a} out of range for {m} modes"));
        }
        if modes[..i].contains(&a) {
            return domain(format!("duplicate mode index {a}"));
        }
    }
    // Only the rows named in `modes` change.
    let g = &global.matrix;
    let mut out = g.clone();
    for (li, &row) in modes.iter().enumerate() {
        for col in 0..m {
            let mut acc = C64::new(0.0, 0.0);
            for (lj, &src) in modes.iter().enumerate() {
                acc += local.matrix[(li, lj)] * g[(src, col)];
            }
            out[(row, col)] = acc;
        }
    }
    ModeUnitary::new(out)
}

/// Permanent of a square complex matrix.
///
/// Sizes up to 2 are expanded directly; larger matrices use Glynn's formula
/// with Gray-code ordering, `O(2^(n-1) n)`.
pub fn permanent(a: &DMatrix<C64>) -> C64 {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    match n {
        0 => C64::new(1.0, 0.0),
        1 => a[(0, 0)],
        2 => a[(0, 0)] * a[(1, 1)] + a[(0, 1)] * a[(1, 0)],
        _ => glynn(a),
    }
}

fn glynn(a: &DMatrix<C64>) -> C64 {
    let n = a.nrows();
    // Column sums with every delta = +1.
    let mut sums: Vec<C64> = (0..n).map(|j| (0..n).map(|i| a[(i, j)]).sum()).collect();
    let mut total: C64 = sums.iter().product();
    let mut sign = 1.0;
    let mut delta = vec![1.0f64; n];
    let mut gray: u64 = 0;
    for k in 1..(1u64 << (n - 1)) {
        let next = k ^ (k >> 1);
        let flipped = (gray ^ next).trailing_zeros() as usize;
        gray = next;
        // Row 0 keeps delta = +1; rows 1..n follow the Gray code.
        let row = flipped + 1;
        delta[row] = -delta[row];
        let scale = 2.0 * delta[row];
        for (j, s) in sums.iter_mut().enumerate() {
            *s += a[(row, j)] * scale;
        }
        sign = -sign;
        total += sums.iter().product::<C64>() * sign;
    }
    total / (1u64 << (n - 1)) as f64
}

fn check_pair(u: &ModeUnitary, input: &FockState, output: &FockState) -> Result<()> {
    if input.modes() != u.modes() || output.modes() != u.modes() {
        return domain(format!(
            "state mode counts ({}, {}) do not match the {}-mode unitary",
            input.modes(),
            output.modes(),
            u.modes()
        ));
    }
    if input.photon_count() != output.photon_count() {
        return domain(format!(
            "photon number mismatch: {} in, {} out",
            input.photon_count(),
            output.photon_count()
        ));
    }
    Ok(())
}

/// Transition amplitude `⟨output| U |input⟩`.
pub fn output_amplitude(u: &ModeUnitary, input: &FockState, output: &FockState) -> Result<C64> {
    check_pair(u, input, output)?;
    Ok(amplitude_unchecked(u, input, output))
}

fn amplitude_unchecked(u: &ModeUnitary, input: &FockState, output: &FockState) -> C64 {
    let cols = input.photon_modes();
    let rows = output.photon_modes();
    let n = cols.len();
    let sub = DMatrix::from_fn(n, n, |r, c| u.matrix[(rows[r], cols[c])]);
    let norm = (input.factorial_product() * output.factorial_product()).sqrt();
    permanent(&sub) / norm
}

/// All occupation patterns of `photons` photons over `modes` modes, in
/// lexicographically descending order of the first mode.
pub fn enumerate_states(modes: usize, photons: u32) -> Vec<FockState> {
    fn rec(modes: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<FockState>) {
        if cur.len() == modes - 1 {
            cur.push(left);
            out.push(FockState(cur.clone()));
            cur.pop();
            return;
        }
        for k in (0..=left).rev() {
            cur.push(k);
            rec(modes, left - k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if modes > 0 {
        rec(modes, photons, &mut Vec::with_capacity(modes), &mut out);
    }
    out
}

/// Outcome probabilities keyed by output state.
pub type OutputDistribution = BTreeMap<FockState, f64>;

fn guard(u: &ModeUnitary, input: &FockState) -> Result<()> {
    if input.modes() != u.modes() {
        return domain(format!(
            "input has {} modes, unitary has {}",
            input.modes(),
            u.modes()
        ));
    }
    if input.photon_count() > MAX_PHOTONS || input.modes() > MAX_MODES {
        return Err(Error::Capacity(format!(
            "enumeration limited to n <= {MAX_PHOTONS}, m <= {MAX_MODES} (got n = {}, m = {})",
            input.photon_count(),
            input.modes()
        )));
    }
    Ok(())
}

/// Output distribution of indistinguishable photons.
pub fn output_distribution(u: &ModeUnitary, input: &FockState) -> Result<OutputDistribution> {
    guard(u, input)?;
    Ok(enumerate_states(u.modes(), input.photon_count())
        .into_iter()
        .map(|out| {
            let p = amplitude_unchecked(u, input, &out).norm_sqr();
            (out, p)
        })
        .collect())
}

/// Output distribution of fully distinguishable photons routed independently:
/// `Per(|U_sub|²) / prod t!`.
pub fn distinguishable_distribution(
    u: &ModeUnitary,
    input: &FockState,
) -> Result<OutputDistribution> {
    guard(u, input)?;
    let cols = input.photon_modes();
    let n = cols.len();
    Ok(enumerate_states(u.modes(), input.photon_count())
        .into_iter()
        .map(|out| {
            let rows = out.photon_modes();
            let sub = DMatrix::from_fn(n, n, |r, c| {
                C64::new(u.matrix[(rows[r], cols[c])].norm_sqr(), 0.0)
            });
            let p = permanent(&sub).re / out.factorial_product();
            (out, p)
        })
        .collect())
}

/// `overlap · quantum + (1 − overlap) · distinguishable` for inputs of at most
/// two photons.
pub fn partially_distinguishable_distribution(
    u: &ModeUnitary,
    input: &FockState,
    overlap: f64,
) -> Result<OutputDistribution> {
    if !(0.0..=1.0).contains(&overlap) {
        return domain(format!("overlap {overlap} outside [0, 1]"));
    }
    if input.photon_count() > 2 {
        return domain("the scalar overlap model covers at most two photons");
    }
    let q = output_distribution(u, input)?;
    let d = distinguishable_distribution(u, input)?;
    Ok(q.into_iter()
        .map(|(s, pq)| {
            let pd = d[&s];
            (s, overlap * pq + (1.0 - overlap) * pd)
        })
        .collect())
}

/// Temporal overlap of the two photons' wavepackets as a function of their
/// relative delay: `max_overlap · exp(−(delay / coherence_time)²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlapModel {
    pub max_overlap: f64,
    pub coherence_time_ps: f64,
}

impl OverlapModel {
    pub fn new(max_overlap: f64, coherence_time_ps: f64) -> Result<Self> {
        let m = OverlapModel {
            max_overlap,
            coherence_time_ps,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.max_overlap) {
            return domain(format!("max_overlap {} outside [0, 1]", self.max_overlap));
        }
        if !(self.coherence_time_ps > 0.0 && self.coherence_time_ps.is_finite()) {
            return domain(format!(
                "coherence_time_ps must be positive, got {}",
                self.coherence_time_ps
            ));
        }
        Ok(())
    }

    pub fn overlap(&self, delay_ps: f64) -> f64 {
        overlap(delay_ps, self)
    }
}

pub fn overlap(delay_ps: f64, model: &OverlapModel) -> f64 {
    let x = delay_ps / model.coherence_time_ps;
    let v = model.max_overlap * (-x * x).exp();
    if v.is_nan() {
        0.0
    } else {
        v
    }
}

/// Probability of one photon in each of `out_modes` when one photon enters
/// each of two distinct modes, for wavepacket overlap `overlap_value`.
pub fn two_photon_coincidence_prob(
    u: &ModeUnitary,
    input: &FockState,
    out_modes: (usize, usize),
    overlap_value: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&overlap_value) {
        return domain(format!("overlap {overlap_value} outside [0, 1]"));
    }
    if input.modes() != u.modes() {
        return domain("input state and unitary disagree on mode count");
    }
    let occupied: Vec<usize> = input.photon_modes();
    if occupied.len() != 2
        || occupied[0] == occupied[1]
        || input.occupations().iter().any(|&n| n > 1)
    {
        return domain(format!(
            "expected exactly two singly occupied input modes, got {input}"
        ));
    }
    let (o1, o2) = out_modes;
    if o1 == o2 || o1 >= u.modes() || o2 >= u.modes() {
        return domain(format!(
            "output modes {out_modes:?} must be distinct and in range"
        ));
    }
    let (i1, i2) = (occupied[0], occupied[1]);
    let out = FockState::from_modes(u.modes(), &[o1, o2])?;
    let p_indist = amplitude_unchecked(u, input, &out).norm_sqr();
    let p = |o, i| u.single_photon_prob(o, i);
    let p_dist = p(o1, i1) * p(o2, i2) + p(o1, i2) * p(o2, i1);
    Ok(overlap_value * p_indist + (1.0 - overlap_value) * p_dist)
}
