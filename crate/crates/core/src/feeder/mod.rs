//! Radial feeder description: parsing, validation, and the linearized
//! distribution-flow sensitivities derived from it.
//!
//! Conventions used throughout the crate:
//!
//! - Bus 0 is the substation. Buses `1..=N` carry loads and devices.
//! - The line feeding bus `n` has index `n - 1` in every per-line vector,
//!   and is oriented from its parent bus (towards the substation) to `n`.
//! - Voltages are squared per-unit magnitudes.
//! - Powers are in MW / MVAr. Line impedances are stored in per-unit on
//!   a 1 MVA base, so `2 R p` with `p` in MW is a squared-pu increment.

mod sensitivity;

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use sensitivity::{build_incidence, build_sensitivity, Incidence, SensitivityBundle};

#[derive(Debug, Error)]
pub enum FeederError {
    #[error("cannot read feeder file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed feeder document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("non-radial topology: {0}")]
    NonRadial(String),
    #[error("arbitrage condition violated: need 0 < sell ({sell}) < block ({block}) < buy ({buy})")]
    Arbitrage { sell: f64, block: f64, buy: f64 },
    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("singular incidence matrix: {0}")]
    Singular(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> FeederError {
    FeederError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

/// On-disk feeder document. See `docs/feeder-format.md`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeederDocument {
    #[serde(default)]
    pub name: String,
    pub base: BaseSpec,
    pub buses: Vec<BusRecord>,
    pub lines: Vec<LineRecord>,
    #[serde(default)]
    pub pv_units: Vec<PvRecord>,
    #[serde(default)]
    pub diesel_units: Vec<DieselRecord>,
    pub prices: PriceSpec,
    pub voltage_regions: VoltageRegions,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseSpec {
    pub voltage_kv: f64,
    /// Power base of the per-unit impedances, MVA.
    #[serde(default = "default_power_base")]
    pub power_mva: f64,
}

fn default_power_base() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusRecord {
    pub index: usize,
    /// Nominal active load, MW.
    #[serde(default)]
    pub p_load: f64,
    /// Nominal reactive load, MVAr.
    #[serde(default)]
    pub q_load: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineRecord {
    pub from: usize,
    pub to: usize,
    /// Resistance, pu on `base.power_mva`.
    pub r: f64,
    /// Reactance, pu on `base.power_mva`.
    pub x: f64,
    /// Apparent power limit, MVA.
    pub s_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PvRecord {
    pub bus: usize,
    pub rating_mw: f64,
    pub inverter_mva: f64,
    pub pf_min: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DieselRecord {
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    /// $/MWh
    pub cost_linear: f64,
    /// $/MW²h
    pub cost_quadratic: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceSpec {
    /// Price of the block purchased ahead of time, $/MWh.
    pub block: f64,
    /// Real-time buying price, $/MWh.
    pub buy: f64,
    /// Real-time selling price, $/MWh.
    pub sell: f64,
    /// PV surplus compensation per PV unit, $/MWh. A single value is
    /// broadcast to every unit; absent means [`DEFAULT_PV_PRICE`].
    #[serde(default)]
    pub pv: Vec<f64>,
}

/// PV compensation when the document gives none, $/MWh.
pub const DEFAULT_PV_PRICE: f64 = 35.0;

/// Squared per-unit voltage limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoltageRegions {
    pub a_lower: f64,
    pub a_upper: f64,
    pub b_lower: f64,
    pub b_upper: f64,
    pub substation_lower: f64,
    pub substation_upper: f64,
}

impl VoltageRegions {
    pub fn in_tight(&self, v: f64, tol: f64) -> bool {
        v >= self.a_lower - tol && v <= self.a_upper + tol
    }

    pub fn in_loose(&self, v: f64, tol: f64) -> bool {
        v >= self.b_lower - tol && v <= self.b_upper + tol
    }
}

/// A line after reorientation, indexed by the bus it feeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub source: usize,
    pub dest: usize,
    pub r: f64,
    pub x: f64,
    pub s_max: f64,
    /// True when the document listed this line destination-first.
    pub reoriented: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PvUnit {
    pub bus: usize,
    pub rating: f64,
    pub inverter_limit: f64,
    pub pf_min: f64,
    /// Reactive-to-active ratio limit, `tan(acos(pf_min))`.
    pub phi: f64,
    pub price: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DieselUnit {
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub cost_linear: f64,
    pub cost_quadratic: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prices {
    pub block: f64,
    pub buy: f64,
    pub sell: f64,
}

/// Validated, immutable feeder.
#[derive(Debug, Clone)]
pub struct FeederModel {
    pub name: String,
    pub voltage_base_kv: f64,
    /// Number of non-substation buses.
    pub n: usize,
    /// `parent[n]` for `n in 1..=N`; `parent[0]` is unused and set to 0.
    pub parent: Vec<usize>,
    /// Line feeding bus `n` stored at index `n - 1`.
    pub lines: Vec<Line>,
    /// Nominal loads for buses `1..=N` at index `n - 1`.
    pub p_load: Vec<f64>,
    pub q_load: Vec<f64>,
    pub pv_units: Vec<PvUnit>,
    pub diesel_units: Vec<DieselUnit>,
    pub prices: Prices,
    pub regions: VoltageRegions,
}

impl FeederModel {
    pub fn from_json_str(text: &str) -> Result<Self, FeederError> {
        let doc: FeederDocument = serde_json::from_str(text)?;
        Self::from_document(doc)
    }

    pub fn from_document(doc: FeederDocument) -> Result<Self, FeederError> {
        validate(doc)
    }

    pub fn total_nominal_load(&self) -> f64 {
        self.p_load.iter().sum()
    }

    pub fn total_pv_rating(&self) -> f64 {
        self.pv_units.iter().map(|u| u.rating).sum()
    }

    /// Number of slow decision coordinates: substation voltage, block, diesel units.
    pub fn slow_dim(&self) -> usize {
        2 + self.diesel_units.len()
    }

    /// Copy of this model with the tight voltage region replaced.
    pub fn with_tight_region(&self, lower: f64, upper: f64) -> Result<Self, FeederError> {
        let mut out = self.clone();
        out.regions.a_lower = lower;
        out.regions.a_upper = upper;
        check_regions(&out.regions)?;
        Ok(out)
    }

    /// Copy of this model with uniform PV compensation price.
    pub fn with_pv_price(&self, price: f64) -> Result<Self, FeederError> {
        if !(price.is_finite() && price >= 0.0) {
            return Err(invalid("prices.pv", "must be finite and nonnegative"));
        }
        let mut out = self.clone();
        for u in &mut out.pv_units {
            u.price = price;
        }
        Ok(out)
    }

    /// Buses sorted so every bus appears after its parent (breadth-first from the substation).
    pub fn topological_order(&self) -> Vec<usize> {
        let mut children = vec![Vec::new(); self.n + 1];
        for bus in 1..=self.n {
            children[self.parent[bus]].push(bus);
        }
        let mut order = Vec::with_capacity(self.n);
        let mut queue = VecDeque::from([0usize]);
        while let Some(b) = queue.pop_front() {
            if b != 0 {
                order.push(b);
            }
            queue.extend(children[b].iter().copied());
        }
        order
    }
}

pub fn load_feeder(path: impl AsRef<Path>) -> Result<FeederModel, FeederError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| FeederError::Io {
        path: path.display().to_string(),
        source,
    })?;
    FeederModel::from_json_str(&text)
}

fn positive(field: &str, value: f64) -> Result<(), FeederError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("must be positive, got {value}")))
    }
}

fn check_regions(r: &VoltageRegions) -> Result<(), FeederError> {
    let all = [
        r.a_lower,
        r.a_upper,
        r.b_lower,
        r.b_upper,
        r.substation_lower,
        r.substation_upper,
    ];
    if all.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(invalid("voltage_regions", "limits must be finite and positive"));
    }
    if !(r.b_lower <= r.a_lower && r.a_lower < r.a_upper && r.a_upper <= r.b_upper) {
        return Err(invalid(
            "voltage_regions",
            "nesting requires b_lower <= a_lower < a_upper <= b_upper",
        ));
    }
    if r.substation_lower > r.substation_upper {
        return Err(invalid(
            "voltage_regions",
            "substation_lower exceeds substation_upper",
        ));
    }
    Ok(())
}

fn validate(doc: FeederDocument) -> Result<FeederModel, FeederError> {
    positive("base.voltage_kv", doc.base.voltage_kv)?;
    positive("base.power_mva", doc.base.power_mva)?;

    let n_buses = doc.buses.len();
    if n_buses < 2 {
        return Err(invalid("buses", "need the substation and at least one bus"));
    }
    let n = n_buses - 1;
    let mut seen = vec![false; n_buses];
    let mut p_load = vec![0.0; n];
    let mut q_load = vec![0.0; n];
    for b in &doc.buses {
        if b.index >= n_buses {
            return Err(invalid(
                "buses",
                format!("index {} outside 0..{}", b.index, n),
            ));
        }
        if std::mem::replace(&mut seen[b.index], true) {
            return Err(invalid("buses", format!("duplicate index {}", b.index)));
        }
        if !(b.p_load.is_finite() && b.p_load >= 0.0 && b.q_load.is_finite()) {
            return Err(invalid(
                "buses",
                format!("bus {} has an invalid nominal load", b.index),
            ));
        }
        if b.index == 0 {
            if b.p_load != 0.0 || b.q_load != 0.0 {
                return Err(invalid("buses", "the substation bus cannot carry load"));
            }
        } else {
            p_load[b.index - 1] = b.p_load;
            q_load[b.index - 1] = b.q_load;
        }
    }

    if doc.lines.len() != n {
        return Err(FeederError::NonRadial(format!(
            "{} lines for {} buses; a radial feeder has exactly {}",
            doc.lines.len(),
            n_buses,
            n
        )));
    }
    for (i, l) in doc.lines.iter().enumerate() {
        if l.from >= n_buses || l.to >= n_buses {
            return Err(invalid(
                "lines",
                format!("line {i} references an unknown bus"),
            ));
        }
        if l.from == l.to {
            return Err(FeederError::NonRadial(format!("line {i} is a self-loop")));
        }
        positive(&format!("lines[{i}].r"), l.r)?;
        positive(&format!("lines[{i}].x"), l.x)?;
        positive(&format!("lines[{i}].s_max"), l.s_max)?;
    }

    // Orient every edge away from the substation.
    let mut adjacency = vec![Vec::new(); n_buses];
    for (i, l) in doc.lines.iter().enumerate() {
        adjacency[l.from].push((l.to, i));
        adjacency[l.to].push((l.from, i));
    }
    let mut parent = vec![usize::MAX; n_buses];
    let mut line_of = vec![usize::MAX; n_buses];
    parent[0] = 0;
    let mut queue = VecDeque::from([0usize]);
    let mut visited = 1;
    while let Some(b) = queue.pop_front() {
        for &(nb, li) in &adjacency[b] {
            if nb == parent[b] && line_of[b] == li {
                continue;
            }
            if parent[nb] != usize::MAX {
                return Err(FeederError::NonRadial(format!(
                    "line {li} closes a cycle through bus {nb}"
                )));
            }
            parent[nb] = b;
            line_of[nb] = li;
            visited += 1;
            queue.push_back(nb);
        }
    }
    if visited != n_buses {
        return Err(FeederError::NonRadial(format!(
            "{} buses unreachable from the substation",
            n_buses - visited
        )));
    }

    let lines = (1..=n)
        .map(|bus| {
            let rec = doc.lines[line_of[bus]];
            Line {
                source: parent[bus],
                dest: bus,
                r: rec.r / doc.base.power_mva,
                x: rec.x / doc.base.power_mva,
                s_max: rec.s_max,
                reoriented: rec.from != parent[bus],
            }
        })
        .collect();

    let pv_prices = match doc.prices.pv.len() {
        0 => vec![DEFAULT_PV_PRICE; doc.pv_units.len()],
        1 => vec![doc.prices.pv[0]; doc.pv_units.len()],
        k if k == doc.pv_units.len() => doc.prices.pv.clone(),
        k => {
            return Err(invalid(
                "prices.pv",
                format!("{k} prices for {} PV units", doc.pv_units.len()),
            ))
        }
    };
    let mut pv_units = Vec::with_capacity(doc.pv_units.len());
    for (i, (u, price)) in doc.pv_units.iter().zip(pv_prices).enumerate() {
        if u.bus == 0 || u.bus > n {
            return Err(invalid(
                format!("pv_units[{i}].bus"),
                "must be a non-substation bus",
            ));
        }
        positive(&format!("pv_units[{i}].rating_mw"), u.rating_mw)?;
        positive(&format!("pv_units[{i}].inverter_mva"), u.inverter_mva)?;
        if !(u.pf_min > 0.0 && u.pf_min <= 1.0) {
            return Err(invalid(
                format!("pv_units[{i}].pf_min"),
                "must lie in (0, 1]",
            ));
        }
        if !(price.is_finite() && price >= 0.0) {
            return Err(invalid("prices.pv", "must be finite and nonnegative"));
        }
        pv_units.push(PvUnit {
            bus: u.bus,
            rating: u.rating_mw,
            inverter_limit: u.inverter_mva,
            pf_min: u.pf_min,
            phi: u.pf_min.acos().tan(),
            price,
        });
    }

    let mut diesel_units = Vec::with_capacity(doc.diesel_units.len());
    for (i, d) in doc.diesel_units.iter().enumerate() {
        if d.bus == 0 || d.bus > n {
            return Err(invalid(
                format!("diesel_units[{i}].bus"),
                "must be a non-substation bus",
            ));
        }
        if !(d.p_min >= 0.0 && d.p_min <= d.p_max && d.p_max.is_finite()) {
            return Err(invalid(
                format!("diesel_units[{i}]"),
                "need 0 <= p_min <= p_max",
            ));
        }
        if !(d.cost_linear.is_finite() && d.cost_quadratic.is_finite() && d.cost_quadratic >= 0.0)
        {
            return Err(invalid(
                format!("diesel_units[{i}]"),
                "cost coefficients must be finite with nonnegative quadratic term",
            ));
        }
        diesel_units.push(DieselUnit {
            bus: d.bus,
            p_min: d.p_min,
            p_max: d.p_max,
            cost_linear: d.cost_linear,
            cost_quadratic: d.cost_quadratic,
        });
    }

    let p = &doc.prices;
    if !(0.0 < p.sell && p.sell < p.block && p.block < p.buy) {
        return Err(FeederError::Arbitrage {
            sell: p.sell,
            block: p.block,
            buy: p.buy,
        });
    }
    check_regions(&doc.voltage_regions)?;

    Ok(FeederModel {
        name: doc.name,
        voltage_base_kv: doc.base.voltage_kv,
        n,
        parent,
        lines,
        p_load,
        q_load,
        pv_units,
        diesel_units,
        prices: Prices {
            block: p.block,
            buy: p.buy,
            sell: p.sell,
        },
        regions: doc.voltage_regions,
    })
}

/// Squared per-unit voltage to per-unit magnitude.
pub fn magnitude_pu(v_squared: f64) -> f64 {
    v_squared.max(0.0).sqrt()
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn path_feeder_parses() {
        let m = FeederModel::from_document(doc(
            3,
            vec![line(0, 1, 0.01, 0.02), line(1, 2, 0.02, 0.03)],
        ))
        .unwrap();
        assert_eq!(m.n, 2);
        assert_eq!(m.parent, vec![0, 0, 1]);
        assert_eq!(m.lines[1].source, 1);
        assert!(!m.lines[1].reoriented);
    }

    #[test]
    fn reversed_lines_are_reoriented() {
        let m = FeederModel::from_document(doc(
            3,
            vec![line(2, 1, 0.02, 0.03), line(1, 0, 0.01, 0.02)],
        ))
        .unwrap();
        assert_eq!(m.lines[0].source, 0);
        assert_eq!(m.lines[0].dest, 1);
        assert_eq!(m.lines[0].r, 0.01);
        assert!(m.lines[0].reoriented);
        assert_eq!(m.lines[1].source, 1);
        assert_eq!(m.lines[1].r, 0.02);
    }

    #[test]
    fn cycle_is_non_radial() {
        let err = FeederModel::from_document(doc(
            4,
            vec![
                line(1, 2, 0.01, 0.01),
                line(2, 3, 0.01, 0.01),
                line(3, 1, 0.01, 0.01),
            ],
        ))
        .unwrap_err();
        assert!(matches!(err, FeederError::NonRadial(_)), "{err}");
        assert!(err.to_string().contains("non-radial"));
    }

    #[test]
    fn cycle_through_substation_is_non_radial() {
        let mut d = doc(
            4,
            vec![
                line(0, 1, 0.01, 0.01),
                line(1, 2, 0.01, 0.01),
                line(2, 0, 0.01, 0.01),
            ],
        );
        let e = FeederModel::from_document(d.clone()).unwrap_err();
        assert!(e.to_string().contains("non-radial"), "{e}");
        d.lines.pop();
        let e = FeederModel::from_document(d).unwrap_err();
        assert!(e.to_string().contains("non-radial"), "{e}");
    }

    #[test]
    fn arbitrage_violation_rejected() {
        let mut d = doc(2, vec![line(0, 1, 0.01, 0.02)]);
        d.prices.sell = 40.0;
        d.prices.block = 37.0;
        let err = FeederModel::from_document(d).unwrap_err();
        assert!(err.to_string().contains("arbitrage condition"), "{err}");
    }

    #[test]
    fn non_positive_impedance_rejected() {
        let d = doc(2, vec![line(0, 1, 0.0, 0.02)]);
        assert!(matches!(
            FeederModel::from_document(d),
            Err(FeederError::Invalid { .. })
        ));
    }

    #[test]
    fn region_nesting_checked() {
        let mut d = doc(2, vec![line(0, 1, 0.01, 0.02)]);
        d.voltage_regions.b_lower = 0.99;
        assert!(FeederModel::from_document(d).is_err());
    }

    #[test]
    fn diesel_bounds_checked() {
        let mut d = doc(2, vec![line(0, 1, 0.01, 0.02)]);
        d.diesel_units.push(DieselRecord {
            bus: 1,
            p_min: 0.6,
            p_max: 0.5,
            cost_linear: 30.0,
            cost_quadratic: 15.0,
        });
        assert!(FeederModel::from_document(d).is_err());
    }

    #[test]
    fn malformed_document_is_parse_error() {
        assert!(matches!(
            FeederModel::from_json_str("{\"buses\": 3}"),
            Err(FeederError::Parse(_))
        ));
    }

    #[test]
    fn pv_phi_from_power_factor() {
        let mut d = doc(2, vec![line(0, 1, 0.01, 0.02)]);
        d.pv_units.push(PvRecord {
            bus: 1,
            rating_mw: 5.0,
            inverter_mva: 6.0,
            pf_min: 0.83,
        });
        let m = FeederModel::from_document(d).unwrap();
        let phi = m.pv_units[0].phi;
        assert!((phi - (1.0 - 0.83f64.powi(2)).sqrt() / 0.83).abs() < 1e-12);
        assert_eq!(m.pv_units[0].price, 35.0);
    }

    #[test]
    fn absent_pv_price_takes_the_default() {
        let mut d = doc(2, vec![line(0, 1, 0.01, 0.02)]);
        d.prices.pv.clear();
        d.pv_units.push(PvRecord {
            bus: 1,
            rating_mw: 1.0,
            inverter_mva: 1.1,
            pf_min: 0.9,
        });
        let m = FeederModel::from_document(d).unwrap();
        assert_eq!(m.pv_units[0].price, DEFAULT_PV_PRICE);
    }
}
