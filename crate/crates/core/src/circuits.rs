//! Waveguide circuit descriptions, the three reference chips, dual-rail
//! encoding and post-selection.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::fock::{
    compose_on_modes, coupler_unitary, phase_unitary, FockState, ModeUnitary, OutputDistribution,
};

/// One circuit element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Element {
    Coupler {
        reflectivity: f64,
        modes: (usize, usize),
    },
    Phase {
        mode: usize,
        phase_rad: f64,
    },
}

/// An ordered list of elements over `mode_count` waveguides. Element `k` acts
/// after elements `0..k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircuitSpec {
    pub label: String,
    pub mode_count: usize,
    #[serde(default)]
    pub elements: Vec<Element>,
}

impl CircuitSpec {
    pub fn new(label: impl Into<String>, mode_count: usize) -> Self {
        CircuitSpec {
            label: label.into(),
            mode_count,
            elements: Vec::new(),
        }
    }

    pub fn coupler(mut self, reflectivity: f64, a: usize, b: usize) -> Self {
        self.elements.push(Element::Coupler {
            reflectivity,
            modes: (a, b),
        });
        self
    }

    pub fn phase(mut self, mode: usize, phase_rad: f64) -> Self {
        self.elements.push(Element::Phase { mode, phase_rad });
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode_count == 0 {
            return domain("circuit needs at least one mode");
        }
        let m = self.mode_count;
        for (k, e) in self.elements.iter().enumerate() {
            match *e {
                Element::Coupler {
                    reflectivity,
                    modes: (a, b),
                } => {
                    if a >= m || b >= m {
                        return domain(format!(
                            "element {k}: coupler modes ({a}, {b}) out of range"
                        ));
                    }
                    if a == b {
                        return domain(format!("element {k}: coupler needs two distinct modes"));
                    }
                    if !(0.0..=1.0).contains(&reflectivity) {
                        return domain(format!(
                            "element {k}: reflectivity {reflectivity} outside [0, 1]"
                        ));
                    }
                }
                Element::Phase { mode, phase_rad } => {
                    if mode >= m {
                        return domain(format!("element {k}: phase mode {mode} out of range"));
                    }
                    if !phase_rad.is_finite() {
                        return domain(format!("element {k}: phase must be finite"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Ordered product of the embedded element unitaries.
pub fn to_unitary(spec: &CircuitSpec) -> Result<ModeUnitary> {
    spec.validate()?;
    let m = spec.mode_count;
    spec.elements
        .iter()
        .try_fold(ModeUnitary::identity(m), |acc, e| match *e {
            Element::Coupler {
                reflectivity,
                modes: (a, b),
            } => compose_on_modes(&acc, &coupler_unitary(reflectivity)?, &[a, b]),
            Element::Phase { mode, phase_rad } => {
                phase_unitary(m, mode, phase_rad)?.then_after(&acc)
            }
        })
}

/// Dual-rail assignment of a two-qubit gate. Rail 0 of a pair encodes |0⟩.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogicalEncoding {
    pub mode_count: usize,
    pub control: (usize, usize),
    pub target: (usize, usize),
    pub ancillas: Vec<usize>,
}

impl LogicalEncoding {
    pub fn validate(&self) -> Result<()> {
        let mut all = vec![self.control.0, self.control.1, self.target.0, self.target.1];
        all.extend(&self.ancillas);
        if all.iter().any(|&k| k >= self.mode_count) {
            return domain("encoding references a mode outside the circuit");
        }
        let mut sorted = all.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != all.len() {
            return domain("rails and ancillas must be disjoint");
        }
        if sorted.len() != self.mode_count {
            return domain("rails and ancillas must cover every mode");
        }
        Ok(())
    }

    /// Input state for logical basis index `k = 2·control + target`.
    pub fn basis_input(&self, k: usize) -> Result<FockState> {
        if k > 3 {
            return domain(format!("logical basis index {k} out of range"));
        }
        let c = if k & 2 == 0 {
            self.control.0
        } else {
            self.control.1
        };
        let t = if k & 1 == 0 {
            self.target.0
        } else {
            self.target.1
        };
        FockState::from_modes(self.mode_count, &[c, t])
    }

    /// Logical index of an output pattern, or `None` if it fails post-selection.
    pub fn decode(&self, state: &FockState) -> Option<usize> {
        let occ = state.occupations();
        if occ.len() != self.mode_count || self.ancillas.iter().any(|&a| occ[a] != 0) {
            return None;
        }
        let bit = |(r0, r1): (usize, usize)| match (occ[r0], occ[r1]) {
            (1, 0) => Some(0),
            (0, 1) => Some(1),
            _ => None,
        };
        Some(bit(self.control)? * 2 + bit(self.target)?)
    }
}

/// Post-selected logical outcome distribution of one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogicalDistribution {
    /// Conditional probabilities over |00⟩, |01⟩, |10⟩, |11⟩.
    pub probabilities: [f64; 4],
    /// Probability mass that passed post-selection.
    pub success_probability: f64,
    /// Nothing passed post-selection; `probabilities` are all zero.
    pub degenerate: bool,
}

pub fn postselect_logical_distribution(
    dist: &OutputDistribution,
    enc: &LogicalEncoding,
) -> Result<LogicalDistribution> {
    enc.validate()?;
    let mut probs = [0.0; 4];
    for (state, &p) in dist {
        if state.modes() != enc.mode_count {
            return domain(format!(
                "distribution over {} modes, encoding over {}",
                state.modes(),
                enc.mode_count
            ));
        }
        if let Some(k) = enc.decode(state) {
            probs[k] += p;
        }
    }
    let success: f64 = probs.iter().sum();
    let degenerate = !(success > 0.0);
    if !degenerate {
        probs.iter_mut().for_each(|p| *p /= success);
    }
    Ok(LogicalDistribution {
        probabilities: probs,
        success_probability: success,
        degenerate,
    })
}

/// Two-input 50:50 directional coupler.
pub fn build_hom() -> CircuitSpec {
    CircuitSpec::new("hom_coupler", 2).coupler(0.5, 0, 1)
}

/// Mode indices of the post-selected CNOT, ordered (vc, c0, c1, t0, t1, vt).
pub mod cnot_modes {
    pub const VC: usize = 0;
    pub const C0: usize = 1;
    pub const C1: usize = 2;
    pub const T0: usize = 3;
    pub const T1: usize = 4;
    pub const VT: usize = 5;
}

/// Post-selected linear-optical CNOT from 1/2 and 1/3 couplers, success
/// probability 1/9.
///
/// With symmetric couplers the two target 50:50 couplers compose to `i·X`, so
/// a fixed π phase on t1 between them is required to make the uncoupled path
/// the identity.
pub fn build_cnot() -> (CircuitSpec, LogicalEncoding) {
    use cnot_modes::*;
    let third = 1.0 / 3.0;
    let spec = CircuitSpec::new("cnot", 6)
        .coupler(0.5, T0, T1)
        .coupler(third, VC, C0)
        .coupler(third, C1, T0)
        .coupler(third, T1, VT)
        .phase(T1, PI)
        .coupler(0.5, T0, T1);
    let enc = LogicalEncoding {
        mode_count: 6,
        control: (C0, C1),
        target: (T0, T1),
        ancillas: vec![VC, VT],
    };
    (spec, enc)
}

/// Mach-Zehnder interferometer with an internal phase `phi` on mode 1.
pub fn build_mzi(phi: f64) -> CircuitSpec {
    CircuitSpec::new("mzi", 2)
        .coupler(0.5, 0, 1)
        .phase(1, phi)
        .coupler(0.5, 0, 1)
}

/// Quadratic (thermo-optic) voltage-to-phase map `φ = α·v²`.
pub fn phase_from_voltage(volts: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return domain(format!("alpha must be positive, got {alpha}"));
    }
    Ok(alpha * volts * volts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{output_distribution, partially_distinguishable_distribution};
    use approx::assert_abs_diff_eq;

    #[test]
    fn empty_is_identity() {
        let u = to_unitary(&CircuitSpec::new("empty", 3)).unwrap();
        assert_eq!(u, ModeUnitary::identity(3));
    }

    #[test]
    fn hom_spec() {
        let spec = build_hom();
        assert_eq!(spec.elements.len(), 1);
        let u = to_unitary(&spec).unwrap();
        assert_eq!(u, coupler_unitary(0.5).unwrap());
        assert_abs_diff_eq!(u.single_photon_prob(0, 0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(u.single_photon_prob(1, 0), 0.5, epsilon = 1e-15);
        let d = output_distribution(&u, &FockState::new(vec![1, 1]).unwrap()).unwrap();
        assert_abs_diff_eq!(
            d[&FockState::new(vec![1, 1]).unwrap()],
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn mzi_endpoints() {
        let u = to_unitary(&build_mzi(0.0)).unwrap();
        assert_abs_diff_eq!(u.single_photon_prob(1, 0), 1.0, epsilon = 1e-14);
        let u = to_unitary(&build_mzi(PI)).unwrap();
        assert_abs_diff_eq!(u.single_photon_prob(0, 0), 1.0, epsilon = 1e-14);
        for k in 0..40 {
            let phi = -3.0 + 0.17 * k as f64;
            let u = to_unitary(&build_mzi(phi)).unwrap();
            assert_abs_diff_eq!(
                u.single_photon_prob(0, 0),
                (1.0 - phi.cos()) / 2.0,
                epsilon = 1e-13
            );
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(to_unitary(&CircuitSpec::new("x", 2).coupler(0.5, 0, 2)).is_err());
        assert!(to_unitary(&CircuitSpec::new("x", 2).coupler(0.5, 1, 1)).is_err());
        assert!(to_unitary(&CircuitSpec::new("x", 2).coupler(2.0, 0, 1)).is_err());
        assert!(to_unitary(&CircuitSpec::new("x", 2).phase(3, 0.0)).is_err());
        assert!(to_unitary(&CircuitSpec::new("x", 0)).is_err());
    }

    #[test]
    fn voltage_map() {
        assert_eq!(phase_from_voltage(0.0, 1.0).unwrap(), 0.0);
        assert_eq!(phase_from_voltage(1.0, 1.0).unwrap(), 1.0);
        assert_eq!(phase_from_voltage(2.0, 0.5).unwrap(), 2.0);
        assert!(phase_from_voltage(1.0, 0.0).is_err());
    }

    #[test]
    fn cnot_ideal_truth_table() {
        let (spec, enc) = build_cnot();
        enc.validate().unwrap();
        let u = to_unitary(&spec).unwrap();
        let ideal = [0usize, 1, 3, 2];
        for (k, &want) in ideal.iter().enumerate() {
            let d = output_distribution(&u, &enc.basis_input(k).unwrap()).unwrap();
            let l = postselect_logical_distribution(&d, &enc).unwrap();
            assert!(!l.degenerate);
            assert_abs_diff_eq!(l.success_probability, 1.0 / 9.0, epsilon = 1e-10);
            assert_abs_diff_eq!(l.probabilities[want], 1.0, epsilon = 1e-10);
            assert_abs_diff_eq!(l.probabilities.iter().sum::<f64>(), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn cnot_distinguishable_keeps_control_zero_rows() {
        let (spec, enc) = build_cnot();
        let u = to_unitary(&spec).unwrap();
        for k in 0..2 {
            let d = partially_distinguishable_distribution(&u, &enc.basis_input(k).unwrap(), 0.0)
                .unwrap();
            let l = postselect_logical_distribution(&d, &enc).unwrap();
            assert_abs_diff_eq!(l.probabilities[k], 1.0, epsilon = 1e-10);
        }
        let d =
            partially_distinguishable_distribution(&u, &enc.basis_input(2).unwrap(), 0.0).unwrap();
        let l = postselect_logical_distribution(&d, &enc).unwrap();
        assert!(l.probabilities[3] < 0.99);
    }

    #[test]
    fn postselect_identity_and_degenerate() {
        let enc = LogicalEncoding {
            mode_count: 4,
            control: (0, 1),
            target: (2, 3),
            ancillas: vec![],
        };
        let d =
            output_distribution(&ModeUnitary::identity(4), &enc.basis_input(1).unwrap()).unwrap();
        let l = postselect_logical_distribution(&d, &enc).unwrap();
        assert_eq!(l.probabilities, [0.0, 1.0, 0.0, 0.0]);
        assert_eq!(l.success_probability, 1.0);

        let enc6 = build_cnot().1;
        let mut d = OutputDistribution::new();
        d.insert(FockState::from_modes(6, &[0, 5]).unwrap(), 1.0);
        let l = postselect_logical_distribution(&d, &enc6).unwrap();
        assert!(l.degenerate);
        assert_eq!(l.success_probability, 0.0);
        assert_eq!(l.probabilities, [0.0; 4]);
    }

    #[test]
    fn encoding_validation() {
        let bad = LogicalEncoding {
            mode_count: 4,
            control: (0, 1),
            target: (1, 2),
            ancillas: vec![],
        };
        assert!(bad.validate().is_err());
        let short = LogicalEncoding {
            mode_count: 5,
            control: (0, 1),
            target: (2, 3),
            ancillas: vec![],
        };
        assert!(short.validate().is_err());
    }

    #[test]
    fn spec_toml_like_round_trip() {
        let (spec, _) = build_cnot();
        let s = serde_json::to_string(&spec).unwrap();
        let back: CircuitSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, spec);
    }
}
