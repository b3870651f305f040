//! Photon-pair source, circuit routing and time-correlated coincidence
//! counting.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::poisson_times;
use crate::error::{domain, Error, Result};
use crate::fock::{partially_distinguishable_distribution, FockState, ModeUnitary, OverlapModel};
use crate::timestamps::{merge_sorted, TimestampStream, PS_PER_S};

/// Probabilities are accepted as normalized within this tolerance.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// CW down-conversion source feeding the two chip inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceModel {
    /// Photon pairs per second arriving at the chip input facets.
    pub pair_rate_hz: f64,
    /// Uncorrelated photons per second per input arm, from pairs whose partner
    /// was lost before the chip.
    #[serde(default)]
    pub unpaired_rate_hz: f64,
    /// Probability that a photon survives fiber-to-chip-to-fiber coupling.
    pub coupling_efficiency: f64,
    pub overlap: OverlapModel,
}

impl SourceModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.pair_rate_hz >= 0.0 && self.pair_rate_hz.is_finite()) {
            return domain("pair rate must be >= 0");
        }
        if !(self.unpaired_rate_hz >= 0.0 && self.unpaired_rate_hz.is_finite()) {
            return domain("unpaired rate must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.coupling_efficiency) {
            return domain("coupling efficiency outside [0, 1]");
        }
        self.overlap.validate()
    }
}

fn thin<R: Rng + ?Sized>(times: &[u64], p: f64, rng: &mut R) -> Vec<u64> {
    if p >= 1.0 {
        return times.to_vec();
    }
    times
        .iter()
        .copied()
        .filter(|_| rng.random_bool(p))
        .collect()
}

/// Pair creation times at `pair_rate_hz`; each photon independently survives
/// coupling. Both photons of a surviving pair carry the creation timestamp.
pub fn generate_pair_arrivals<R: Rng + ?Sized>(
    src: &SourceModel,
    duration_s: f64,
    rng: &mut R,
) -> Result<(TimestampStream, TimestampStream)> {
    src.validate()?;
    if !(duration_s > 0.0) {
        return domain("duration must be positive");
    }
    let created = poisson_times(src.pair_rate_hz, duration_s, rng);
    let c = src.coupling_efficiency;
    let mut a = Vec::with_capacity(created.len());
    let mut b = Vec::with_capacity(created.len());
    for t in created {
        if c >= 1.0 || rng.random_bool(c) {
            a.push(t);
        }
        if c >= 1.0 || rng.random_bool(c) {
            b.push(t);
        }
    }
    Ok((
        TimestampStream::from_sorted("arm_a", a),
        TimestampStream::from_sorted("arm_b", b),
    ))
}

/// Uncorrelated photons in each arm at `unpaired_rate_hz`, thinned by coupling.
pub fn generate_unpaired_arrivals<R: Rng + ?Sized>(
    src: &SourceModel,
    duration_s: f64,
    rng: &mut R,
) -> Result<(TimestampStream, TimestampStream)> {
    src.validate()?;
    if !(duration_s > 0.0) {
        return domain("duration must be positive");
    }
    let mut arm = |label: &str| {
        let t = poisson_times(src.unpaired_rate_hz, duration_s, rng);
        TimestampStream::from_sorted(label, thin(&t, src.coupling_efficiency, rng))
    };
    let a = arm("arm_a_unpaired");
    let b = arm("arm_b_unpaired");
    Ok((a, b))
}

/// Outcome probabilities of one pair after the circuit, seen by two detectors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairOutcomes {
    /// One photon at each detector.
    pub split: f64,
    pub both_first: f64,
    pub both_second: f64,
    /// At least one photon leaves through a mode without a detector.
    pub lost: f64,
}

/// How photons entering the two arms reach the two detectors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingTable {
    pub pair: PairOutcomes,
    /// `[to detector 1, to detector 2]` for a lone photon from arm A.
    pub single_a: [f64; 2],
    pub single_b: [f64; 2],
}

impl RoutingTable {
    /// Balanced two-port splitter with coincidence probability `p_cc`; the
    /// remainder bunches equally onto each side.
    pub fn balanced(p_cc: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_cc) {
            return domain(format!("coincidence probability {p_cc} outside [0, 1]"));
        }
        let bunch = (1.0 - p_cc) / 2.0;
        RoutingTable {
            pair: PairOutcomes {
                split: p_cc,
                both_first: bunch,
                both_second: bunch,
                lost: 0.0,
            },
            single_a: [0.5, 0.5],
            single_b: [0.5, 0.5],
        }
        .validated()
    }

    /// Routing through `u` with photons injected into `inputs` and detectors
    /// on `outputs`, for a pair overlap `overlap_value`.
    pub fn from_circuit(
        u: &ModeUnitary,
        inputs: (usize, usize),
        outputs: (usize, usize),
        overlap_value: f64,
    ) -> Result<Self> {
        let m = u.modes();
        let (ia, ib) = inputs;
        let (o1, o2) = outputs;
        if ia == ib || o1 == o2 || [ia, ib, o1, o2].iter().any(|&k| k >= m) {
            return domain("routing needs distinct in-range input and output modes");
        }
        let input = FockState::from_modes(m, &[ia, ib])?;
        let dist = partially_distinguishable_distribution(u, &input, overlap_value)?;
        let (mut split, mut first, mut second) = (0.0, 0.0, 0.0);
        for (state, p) in dist {
            let occ = state.occupations();
            match (occ[o1], occ[o2]) {
                (1, 1) => split += p,
                (2, 0) => first += p,
                (0, 2) => second += p,
                _ => {}
            }
        }
        RoutingTable {
            pair: PairOutcomes {
                split,
                both_first: first,
                both_second: second,
                lost: (1.0 - split - first - second).max(0.0),
            },
            single_a: [u.single_photon_prob(o1, ia), u.single_photon_prob(o2, ia)],
            single_b: [u.single_photon_prob(o1, ib), u.single_photon_prob(o2, ib)],
        }
        .validated()
    }

    fn validated(self) -> Result<Self> {
        let p = self.pair;
        let probs = [p.split, p.both_first, p.both_second, p.lost];
        if probs.iter().any(|&x| !(x >= -NORMALIZATION_TOL)) {
            return domain("negative routing probability");
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return domain(format!("pair outcome probabilities sum to {total}, not 1"));
        }
        for s in [self.single_a, self.single_b] {
            if s.iter().any(|&x| !(x >= -NORMALIZATION_TOL))
                || s[0] + s[1] > 1.0 + NORMALIZATION_TOL
            {
                return domain(
                    "single-photon routing probabilities must lie in [0, 1] and sum to <= 1",
                );
            }
        }
        Ok(self)
    }
}

enum Dest {
    First,
    Second,
    Lost,
}

fn route_single<R: Rng + ?Sized>(p: [f64; 2], rng: &mut R) -> Dest {
    let u: f64 = rng.random();
    if u < p[0] {
        Dest::First
    } else if u < p[0] + p[1] {
        Dest::Second
    } else {
        Dest::Lost
    }
}

/// Sends arm photons to the two detectors.
///
/// Equal timestamps present in both arms are treated as the two photons of a
/// pair and routed jointly; any other photon is routed on its own.
pub fn route_pairs<R: Rng + ?Sized>(
    a: &TimestampStream,
    b: &TimestampStream,
    table: &RoutingTable,
    rng: &mut R,
) -> Result<(TimestampStream, TimestampStream)> {
    let table = table.validated()?;
    for s in [a, b] {
        if s.times().windows(2).any(|w| w[1] < w[0]) {
            return domain(format!("stream `{}` is not sorted", s.channel));
        }
    }
    let (ta, tb) = (a.times(), b.times());
    let mut d1 = Vec::with_capacity(ta.len());
    let mut d2 = Vec::with_capacity(tb.len());
    let push = |dest: Dest, t: u64, d1: &mut Vec<u64>, d2: &mut Vec<u64>| match dest {
        Dest::First => d1.push(t),
        Dest::Second => d2.push(t),
        Dest::Lost => {}
    };
    let p = table.pair;
    let (mut i, mut j) = (0, 0);
    while i < ta.len() || j < tb.len() {
        let next_a = ta.get(i).copied().unwrap_or(u64::MAX);
        let next_b = tb.get(j).copied().unwrap_or(u64::MAX);
        if next_a == next_b {
            let t = next_a;
            let u: f64 = rng.random();
            if u < p.split {
                d1.push(t);
                d2.push(t);
            } else if u < p.split + p.both_first {
                d1.push(t);
                d1.push(t);
            } else if u < p.split + p.both_first + p.both_second {
                d2.push(t);
                d2.push(t);
            }
            i += 1;
            j += 1;
        } else if next_a < next_b {
            push(route_single(table.single_a, rng), next_a, &mut d1, &mut d2);
            i += 1;
        } else {
            push(route_single(table.single_b, rng), next_b, &mut d1, &mut d2);
            j += 1;
        }
    }
    Ok((
        TimestampStream::from_sorted("detector_1", d1),
        TimestampStream::from_sorted("detector_2", d2),
    ))
}

/// Routes uncorrelated photons; never pairs them.
pub fn route_singles<R: Rng + ?Sized>(
    a: &TimestampStream,
    b: &TimestampStream,
    table: &RoutingTable,
    rng: &mut R,
) -> Result<(TimestampStream, TimestampStream)> {
    let mut d1 = Vec::new();
    let mut d2 = Vec::new();
    for (s, probs) in [(a, table.single_a), (b, table.single_b)] {
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for &t in s.times() {
            match route_single(probs, rng) {
                Dest::First => x.push(t),
                Dest::Second => y.push(t),
                Dest::Lost => {}
            }
        }
        d1 = merge_sorted(&d1, &x);
        d2 = merge_sorted(&d2, &y);
    }
    Ok((
        TimestampStream::from_sorted("detector_1", d1),
        TimestampStream::from_sorted("detector_2", d2),
    ))
}

/// Coincidence count with its Poisson uncertainty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceResult {
    pub count: u64,
    pub duration_s: f64,
    pub window_ps: u64,
    pub rate_hz: f64,
    /// √count.
    pub error: f64,
}

impl CoincidenceResult {
    pub fn new(count: u64, duration_s: f64, window_ps: u64) -> Self {
        CoincidenceResult {
            count,
            duration_s,
            window_ps,
            rate_hz: if duration_s > 0.0 {
                count as f64 / duration_s
            } else {
                0.0
            },
            error: (count as f64).sqrt(),
        }
    }
}

/// Counts pairs with `|t_a − (t_b + offset)| ≤ window/2`, each click used at
/// most once, by a greedy earliest-first two-pointer sweep.
pub fn count_coincidences(
    a: &TimestampStream,
    b: &TimestampStream,
    window_ps: u64,
    offset_ps: i64,
    duration_s: f64,
) -> CoincidenceResult {
    let (ta, tb) = (a.times(), b.times());
    let (mut i, mut j, mut n) = (0usize, 0usize, 0u64);
    let w = window_ps as i128;
    while i < ta.len() && j < tb.len() {
        let diff = ta[i] as i128 - (tb[j] as i128 + offset_ps as i128);
        if 2 * diff.abs() <= w {
            n += 1;
            i += 1;
            j += 1;
        } else if diff < 0 {
            i += 1;
        } else {
            j += 1;
        }
    }
    CoincidenceResult::new(n, duration_s, window_ps)
}

/// Expected accidental rate `r1·r2·w` of two independent streams.
pub fn accidental_rate_analytic(r1_hz: f64, r2_hz: f64, window_ps: f64) -> Result<f64> {
    if !(r1_hz >= 0.0 && r2_hz >= 0.0 && window_ps >= 0.0) {
        return domain("rates and window must be non-negative");
    }
    Ok(r1_hz * r2_hz * window_ps / PS_PER_S)
}

/// Coincidences at an offset far from any true correlation; an empirical
/// accidental estimate.
pub fn delayed_window_accidentals(
    a: &TimestampStream,
    b: &TimestampStream,
    window_ps: u64,
    large_offset_ps: i64,
    duration_s: f64,
) -> Result<CoincidenceResult> {
    if (large_offset_ps.unsigned_abs() as u128) <= 10 * window_ps as u128 {
        return domain(format!(
            "offset {large_offset_ps} ps must exceed ten windows ({} ps)",
            10 * window_ps
        ));
    }
    Ok(count_coincidences(
        a,
        b,
        window_ps,
        large_offset_ps,
        duration_s,
    ))
}

/// A value with its one-sigma uncertainty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
}

/// Poisson σ of a count; zero counts are given a one-count uncertainty.
fn count_sigma(n: f64) -> f64 {
    n.max(1.0).sqrt()
}

/// `V = (n_max − n_min) / n_max` with Poisson error propagation.
pub fn visibility(n_max: f64, n_min: f64) -> Result<Estimate> {
    if !(n_max > 0.0) {
        return Err(Error::Undefined("visibility needs n_max > 0".into()));
    }
    if !(n_min >= 0.0) {
        return domain("n_min must be non-negative");
    }
    let value = (n_max - n_min) / n_max;
    let d_min = 1.0 / n_max;
    let d_max = n_min / (n_max * n_max);
    let error =
        ((d_min * count_sigma(n_min)).powi(2) + (d_max * count_sigma(n_max)).powi(2)).sqrt();
    Ok(Estimate { value, error })
}

/// Visibility after subtracting `n_acc` accidentals from both extremes;
/// the subtracted minimum is floored at zero.
pub fn corrected_visibility(n_max: f64, n_min: f64, n_acc: f64) -> Result<Estimate> {
    if !(n_acc >= 0.0) || !(n_min >= 0.0) {
        return domain("counts must be non-negative");
    }
    if !(n_max > n_acc) {
        return Err(Error::Undefined(format!(
            "corrected visibility needs n_max ({n_max}) > n_acc ({n_acc})"
        )));
    }
    let denom = n_max - n_acc;
    let signal_min = (n_min - n_acc).max(0.0);
    let value = (denom - signal_min) / denom;
    let (d_max, d_min, d_acc) = if n_min > n_acc {
        (
            (n_min - n_acc) / (denom * denom),
            -1.0 / denom,
            (n_max - n_min) / (denom * denom),
        )
    } else {
        (0.0, 0.0, 0.0)
    };
    let error = ((d_max * count_sigma(n_max)).powi(2)
        + (d_min * count_sigma(n_min)).powi(2)
        + (d_acc * n_acc.sqrt()).powi(2))
    .sqrt();
    Ok(Estimate { value, error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuits::{build_hom, to_unitary};
    use crate::seeding::substream;
    use approx::assert_abs_diff_eq;

    fn src(pair_rate: f64, coupling: f64) -> SourceModel {
        SourceModel {
            pair_rate_hz: pair_rate,
            unpaired_rate_hz: 0.0,
            coupling_efficiency: coupling,
            overlap: OverlapModel::new(1.0, 1.0).unwrap(),
        }
    }

    fn stream(v: &[u64]) -> TimestampStream {
        TimestampStream::new("s", v.to_vec()).unwrap()
    }

    #[test]
    fn zero_rate_source_is_empty() {
        let (a, b) = generate_pair_arrivals(&src(0.0, 1.0), 1.0, &mut substream(1, 0)).unwrap();
        assert!(a.is_empty() && b.is_empty());
        assert!(generate_pair_arrivals(&src(1.0, 1.0), 0.0, &mut substream(1, 0)).is_err());
    }

    #[test]
    fn pair_counts_are_poisson() {
        let (a, b) = generate_pair_arrivals(&src(5000.0, 1.0), 10.0, &mut substream(3, 0)).unwrap();
        let mean = 5e4;
        for s in [&a, &b] {
            assert!((s.len() as f64 - mean).abs() < 4.0 * mean.sqrt());
        }
        assert_eq!(a.times(), b.times());
    }

    #[test]
    fn coupling_thins_binomially() {
        let mut rng = substream(4, 0);
        let (a, b) = generate_pair_arrivals(&src(5000.0, 0.7), 10.0, &mut rng).unwrap();
        // Pair count is the size of the union of both arms only when nothing
        // collides, so regenerate it from the same seed with full coupling.
        let (all, _) =
            generate_pair_arrivals(&src(5000.0, 1.0), 10.0, &mut substream(4, 0)).unwrap();
        let n = all.len() as f64;
        let sd = (n * 0.7 * 0.3).sqrt();
        for s in [&a, &b] {
            assert!(
                (s.len() as f64 - 0.7 * n).abs() < 4.0 * sd,
                "{} vs {}",
                s.len(),
                0.7 * n
            );
        }
    }

    #[test]
    fn balanced_routing_table() {
        let t = RoutingTable::balanced(0.5).unwrap();
        assert_eq!(t.pair.both_first, 0.25);
        assert!(RoutingTable::balanced(1.2).is_err());
        let hom = to_unitary(&build_hom()).unwrap();
        let t = RoutingTable::from_circuit(&hom, (0, 1), (0, 1), 1.0).unwrap();
        assert_abs_diff_eq!(t.pair.split, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(t.pair.both_first, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(t.single_a[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn routing_rejects_bad_tables() {
        let mut t = RoutingTable::balanced(0.5).unwrap();
        t.pair.split = 0.9;
        let s = stream(&[1]);
        assert!(route_pairs(&s, &s, &t, &mut substream(1, 0)).is_err());
    }

    #[test]
    fn dip_bottom_has_no_true_coincidences() {
        let times: Vec<u64> = (0..10_000u64).map(|k| k * 1_000_000).collect();
        let s = stream(&times);
        let t = RoutingTable::balanced(0.0).unwrap();
        let (d1, d2) = route_pairs(&s, &s, &t, &mut substream(5, 0)).unwrap();
        assert_eq!(count_coincidences(&d1, &d2, 1000, 0, 1.0).count, 0);
        assert_eq!(d1.len() + d2.len(), 20_000);
    }

    #[test]
    fn off_dip_half_split() {
        let times: Vec<u64> = (0..40_000u64).map(|k| k * 1_000_000).collect();
        let s = stream(&times);
        let t = RoutingTable::balanced(0.5).unwrap();
        let (d1, d2) = route_pairs(&s, &s, &t, &mut substream(6, 0)).unwrap();
        let n = count_coincidences(&d1, &d2, 1000, 0, 1.0).count as f64;
        let sd = (40_000.0f64 * 0.25).sqrt();
        assert!((n - 20_000.0).abs() < 4.0 * sd);
    }

    #[test]
    fn lone_photons_route_singly() {
        let a = stream(&[10, 30]);
        let b = stream(&[20]);
        let t = RoutingTable::balanced(1.0).unwrap();
        let (d1, d2) = route_pairs(&a, &b, &t, &mut substream(2, 0)).unwrap();
        assert_eq!(d1.len() + d2.len(), 3);
    }

    #[test]
    fn coincidence_examples() {
        let s = stream(&[0, 100, 5000, 9000]);
        assert_eq!(count_coincidences(&s, &s, 4, 0, 1.0).count, 4);
        let far = stream(&[1_000_000, 2_000_000]);
        assert_eq!(count_coincidences(&s, &far, 1000, 0, 1.0).count, 0);
        // Window edges are inclusive at exactly w/2.
        assert_eq!(
            count_coincidences(&stream(&[500]), &stream(&[0]), 1000, 0, 1.0).count,
            1
        );
        assert_eq!(
            count_coincidences(&stream(&[501]), &stream(&[0]), 1000, 0, 1.0).count,
            0
        );
        // Each click is used once.
        assert_eq!(
            count_coincidences(&stream(&[10, 12]), &stream(&[11]), 10, 0, 1.0).count,
            1
        );
        let r = count_coincidences(&stream(&[10, 12]), &stream(&[11, 12]), 10, 0, 2.0);
        assert_eq!((r.count, r.rate_hz, r.error), (2, 1.0, 2f64.sqrt()));
    }

    #[test]
    fn accidental_formula() {
        assert_eq!(accidental_rate_analytic(0.0, 1e4, 1000.0).unwrap(), 0.0);
        assert_abs_diff_eq!(
            accidental_rate_analytic(1000.0, 1000.0, 1000.0).unwrap(),
            1e-3,
            epsilon = 1e-15
        );
        assert!(accidental_rate_analytic(-1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn independent_streams_give_accidentals() {
        let mut rng = substream(11, 0);
        let a = stream(&poisson_times(1e4, 100.0, &mut rng));
        let b = stream(&poisson_times(1e4, 100.0, &mut rng));
        let expected = accidental_rate_analytic(1e4, 1e4, 1000.0).unwrap() * 100.0;
        let n = count_coincidences(&a, &b, 1000, 0, 100.0).count as f64;
        assert!(
            (n - expected).abs() < 4.0 * expected.sqrt(),
            "{n} vs {expected}"
        );
        let d = delayed_window_accidentals(&a, &b, 1000, 50_000, 100.0).unwrap();
        assert!((d.count as f64 - expected).abs() < 4.0 * expected.sqrt());
        assert!(delayed_window_accidentals(&a, &b, 1000, 5000, 100.0).is_err());
        let e = TimestampStream::empty("e");
        assert_eq!(
            delayed_window_accidentals(&e, &b, 1000, 50_000, 1.0)
                .unwrap()
                .count,
            0
        );
    }

    #[test]
    fn visibility_examples() {
        let v = visibility(200.0, 20.0).unwrap();
        assert_abs_diff_eq!(v.value, 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(
            v.error,
            0.1 * (1.0f64 / 20.0 + 1.0 / 200.0).sqrt(),
            epsilon = 1e-15
        );
        let v = visibility(200.0, 0.0).unwrap();
        assert_eq!(v.value, 1.0);
        assert_abs_diff_eq!(v.error, 1.0 / 200.0, epsilon = 1e-15);
        assert_eq!(visibility(50.0, 50.0).unwrap().value, 0.0);
        assert!(matches!(visibility(0.0, 0.0), Err(Error::Undefined(_))));
    }

    #[test]
    fn corrected_visibility_examples() {
        let raw = visibility(300.0, 40.0).unwrap();
        let c = corrected_visibility(300.0, 40.0, 0.0).unwrap();
        assert_abs_diff_eq!(c.value, raw.value, epsilon = 1e-15);
        assert_abs_diff_eq!(c.error, raw.error, epsilon = 1e-15);
        let c = corrected_visibility(11000.0, 1111.0, 200.0).unwrap();
        assert_abs_diff_eq!(c.value, 0.9157, epsilon = 1e-4);
        assert_eq!(corrected_visibility(500.0, 30.0, 30.0).unwrap().value, 1.0);
        assert!(matches!(
            corrected_visibility(10.0, 5.0, 10.0),
            Err(Error::Undefined(_))
        ));
    }
}
