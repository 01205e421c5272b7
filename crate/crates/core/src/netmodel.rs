//! Network data model, per-unit conversion and case-file ingestion.
//!
//! A [`Network`] is built from a JSON case file whose electrical quantities are
//! given in engineering units (MW, MVAr) or already on the system base
//! (`*_pu` fields). Everything inside a `Network` is per-unit on `s_base`.
//! Once constructed a network is immutable; studies that change it (spur
//! attachments, load scaling) return a new value.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::MachineParams;

pub type BusId = u32;

/// Nominal system frequency of both bundled cases.
pub const F_SYS_HZ: f64 = 60.0;

/// Floor applied to spur impedance magnitudes so the admittance matrix stays finite.
pub const MIN_BRANCH_IMPEDANCE_PU: f64 = 1e-6;

/// Default overhead-line constant for EV/PV spur lines, ohm per km.
pub const DEFAULT_SPUR_OHM_PER_KM: Complex64 = Complex64::new(0.05, 0.40);

#[derive(Debug, Error)]
pub enum NetError {
    #[error("cannot read case file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed case file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid {element}: {reason}")]
    Validation { element: String, reason: String },
    #[error("unknown bus {0}")]
    UnknownBus(BusId),
    #[error("unknown bundled case '{0}' (expected ieee9 or ieee39)")]
    UnknownCase(String),
}

fn invalid(element: impl Into<String>, reason: impl Into<String>) -> NetError {
    NetError::Validation {
        element: element.into(),
        reason: reason.into(),
    }
}

/// Per-unit conversions on a three-phase MVA / line-to-line kV base.
pub mod units {
    pub fn mw_to_pu(mw: f64, s_base_mva: f64) -> f64 {
        mw / s_base_mva
    }

    pub fn pu_to_mw(pu: f64, s_base_mva: f64) -> f64 {
        pu * s_base_mva
    }

    pub fn base_impedance_ohm(base_kv: f64, s_base_mva: f64) -> f64 {
        base_kv * base_kv / s_base_mva
    }

    pub fn ohm_to_pu(ohm: f64, base_kv: f64, s_base_mva: f64) -> f64 {
        ohm / base_impedance_ohm(base_kv, s_base_mva)
    }

    pub fn pu_to_ohm(pu: f64, base_kv: f64, s_base_mva: f64) -> f64 {
        pu * base_impedance_ohm(base_kv, s_base_mva)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: BusId,
    pub kind: BusKind,
    pub base_kv: f64,
    /// Initial / scheduled voltage magnitude.
    pub v_mag: f64,
    pub v_ang: f64,
    pub p_load: f64,
    pub q_load: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: BusId,
    pub to: BusId,
    pub r: f64,
    pub x: f64,
    /// Total line charging susceptance.
    pub b_shunt: f64,
    pub rating: Option<f64>,
}

impl Branch {
    pub fn z_mag(&self) -> f64 {
        self.r.hypot(self.x)
    }

    pub fn series_admittance(&self) -> Complex64 {
        Complex64::new(self.r, self.x).inv()
    }

    pub fn id(&self) -> (BusId, BusId) {
        (self.from, self.to)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub bus: BusId,
    pub p_set: f64,
    pub v_set: f64,
    pub mva_base: f64,
    pub machine: MachineParams,
    /// Reactive limits (min, max), only used when the solver enforces them.
    pub q_limits: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttachmentKind {
    Ev,
    Pv,
}

/// A leaf bus hung off an existing bus through a short spur line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attachment {
    pub kind: AttachmentKind,
    pub host: BusId,
    pub leaf: BusId,
    pub length_km: f64,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub name: String,
    pub f_sys: f64,
    pub s_base: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<GeneratorSpec>,
    pub attachments: Vec<Attachment>,
    index: BTreeMap<BusId, usize>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.f_sys == other.f_sys
            && self.s_base == other.s_base
            && self.buses == other.buses
            && self.branches == other.branches
            && self.generators == other.generators
            && self.attachments == other.attachments
    }
}

// ---------------------------------------------------------------------------
// Case file schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CaseFile {
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    pub f_sys_hz: f64,
    pub s_base_mva: f64,
    pub buses: Vec<CaseBus>,
    pub branches: Vec<CaseBranch>,
    pub generators: Vec<CaseGenerator>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attachments: Vec<Attachment>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CaseBus {
    pub id: BusId,
    pub kind: BusKind,
    pub base_kv: f64,
    #[serde(default)]
    pub p_load_mw: f64,
    #[serde(default)]
    pub q_load_mvar: f64,
    #[serde(default = "one")]
    pub v_set_pu: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CaseBranch {
    pub from: BusId,
    pub to: BusId,
    pub r_pu: f64,
    pub x_pu: f64,
    #[serde(default)]
    pub b_pu: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating_mva: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CaseGenerator {
    pub bus: BusId,
    pub p_set_mw: f64,
    pub v_set_pu: f64,
    pub mva_base: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_min_mvar: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_max_mvar: Option<f64>,
    #[serde(default)]
    pub machine: MachineParams,
}

fn one() -> f64 {
    1.0
}

const IEEE9_JSON: &str = include_str!("../data/ieee9.json");
const IEEE39_JSON: &str = include_str!("../data/ieee39.json");

/// Bundled test cases, addressed as `ieee9` / `ieee39` (with or without `.json`).
pub fn bundled_case(name: &str) -> Result<Network, NetError> {
    let stem = name.strip_suffix(".json").unwrap_or(name);
    match stem {
        "ieee9" => parse_case(IEEE9_JSON),
        "ieee39" => parse_case(IEEE39_JSON),
        other => Err(NetError::UnknownCase(other.to_string())),
    }
}

pub fn parse_case(text: &str) -> Result<Network, NetError> {
    let case: CaseFile = serde_json::from_str(text)?;
    Network::from_case(&case)
}

/// Loads a case from disk. A path that does not exist but names a bundled
/// case (`ieee9.json`, `ieee39`) resolves to the embedded copy.
pub fn load_case(path: impl AsRef<Path>) -> Result<Network, NetError> {
    let path = path.as_ref();
    match std::fs::read_to_string(path) {
        Ok(text) => parse_case(&text),
        Err(source) => {
            let name = path.file_name().and_then(|s| s.to_str()).unwrap_or_default();
            let is_bare = path.parent().is_none_or(|p| p.as_os_str().is_empty());
            if is_bare {
                if let Ok(net) = bundled_case(name) {
                    return Ok(net);
                }
            }
            Err(NetError::Io {
                path: path.display().to_string(),
                source,
            })
        }
    }
}

impl Network {
    pub fn from_case(case: &CaseFile) -> Result<Self, NetError> {
        if !(case.s_base_mva > 0.0) {
            return Err(invalid("case", format!("s_base_mva must be positive, got {}", case.s_base_mva)));
        }
        let s = case.s_base_mva;
        let buses = case
            .buses
            .iter()
            .map(|b| Bus {
                id: b.id,
                kind: b.kind,
                base_kv: b.base_kv,
                v_mag: b.v_set_pu,
                v_ang: 0.0,
                p_load: units::mw_to_pu(b.p_load_mw, s),
                q_load: units::mw_to_pu(b.q_load_mvar, s),
            })
            .collect();
        let branches = case
            .branches
            .iter()
            .map(|b| Branch {
                from: b.from,
                to: b.to,
                r: b.r_pu,
                x: b.x_pu,
                b_shunt: b.b_pu,
                rating: b.rating_mva.map(|r| units::mw_to_pu(r, s)),
            })
            .collect();
        let generators = case
            .generators
            .iter()
            .map(|g| GeneratorSpec {
                bus: g.bus,
                p_set: units::mw_to_pu(g.p_set_mw, s),
                v_set: g.v_set_pu,
                mva_base: g.mva_base,
                machine: g.machine.clone(),
                q_limits: match (g.q_min_mvar, g.q_max_mvar) {
                    (None, None) => None,
                    (lo, hi) => Some((
                        units::mw_to_pu(lo.unwrap_or(f64::NEG_INFINITY), s),
                        units::mw_to_pu(hi.unwrap_or(f64::INFINITY), s),
                    )),
                },
            })
            .collect();
        Network::new(case.name.clone(), case.f_sys_hz, s, buses, branches, generators, case.attachments.clone())
    }

    pub fn to_case(&self) -> CaseFile {
        let s = self.s_base;
        CaseFile {
            name: self.name.clone(),
            source: None,
            f_sys_hz: self.f_sys,
            s_base_mva: s,
            buses: self
                .buses
                .iter()
                .map(|b| CaseBus {
                    id: b.id,
                    kind: b.kind,
                    base_kv: b.base_kv,
                    p_load_mw: units::pu_to_mw(b.p_load, s),
                    q_load_mvar: units::pu_to_mw(b.q_load, s),
                    v_set_pu: b.v_mag,
                })
                .collect(),
            branches: self
                .branches
                .iter()
                .map(|b| CaseBranch {
                    from: b.from,
                    to: b.to,
                    r_pu: b.r,
                    x_pu: b.x,
                    b_pu: b.b_shunt,
                    rating_mva: b.rating.map(|r| units::pu_to_mw(r, s)),
                })
                .collect(),
            generators: self
                .generators
                .iter()
                .map(|g| CaseGenerator {
                    bus: g.bus,
                    p_set_mw: units::pu_to_mw(g.p_set, s),
                    v_set_pu: g.v_set,
                    mva_base: g.mva_base,
                    q_min_mvar: g.q_limits.map(|(lo, _)| units::pu_to_mw(lo, s)),
                    q_max_mvar: g.q_limits.map(|(_, hi)| units::pu_to_mw(hi, s)),
                    machine: g.machine.clone(),
                })
                .collect(),
            attachments: self.attachments.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_case()).expect("case file serializes")
    }

    /// Assembles and validates a network from already per-unit parts.
    pub fn new(
        name: String,
        f_sys: f64,
        s_base: f64,
        buses: Vec<Bus>,
        branches: Vec<Branch>,
        generators: Vec<GeneratorSpec>,
        attachments: Vec<Attachment>,
    ) -> Result<Self, NetError> {
        let mut index = BTreeMap::new();
        for (i, bus) in buses.iter().enumerate() {
            if index.insert(bus.id, i).is_some() {
                return Err(invalid(format!("bus {}", bus.id), "duplicate bus id"));
            }
        }
        let net = Network {
            name,
            f_sys,
            s_base,
            buses,
            branches,
            generators,
            attachments,
            index,
        };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<(), NetError> {
        if (self.f_sys - F_SYS_HZ).abs() > 1e-9 {
            return Err(invalid("network", format!("f_sys must be {F_SYS_HZ} Hz, got {}", self.f_sys)));
        }
        if !(self.s_base > 0.0) {
            return Err(invalid("network", "s_base must be positive"));
        }
        let slack: Vec<_> = self.buses.iter().filter(|b| b.kind == BusKind::Slack).collect();
        match slack.len() {
            1 => {}
            0 => return Err(invalid("network", "no slack bus")),
            _ => {
                let ids: Vec<_> = slack.iter().map(|b| b.id.to_string()).collect();
                return Err(invalid(format!("bus {}", ids[1]), format!("multiple slack buses ({})", ids.join(", "))));
            }
        }
        for bus in &self.buses {
            if !(bus.base_kv > 0.0) {
                return Err(invalid(format!("bus {}", bus.id), "base_kv must be positive"));
            }
        }
        for br in &self.branches {
            let name = format!("branch {}-{}", br.from, br.to);
            if br.from == br.to {
                return Err(invalid(name, "from and to bus are equal"));
            }
            for end in [br.from, br.to] {
                if !self.index.contains_key(&end) {
                    return Err(invalid(name.clone(), format!("references unknown bus {end}")));
                }
            }
            if br.x == 0.0 || !br.x.is_finite() || !br.r.is_finite() {
                return Err(invalid(name, "reactance must be finite and non-zero"));
            }
        }
        for g in &self.generators {
            let name = format!("generator at bus {}", g.bus);
            let bus = self.bus(g.bus).map_err(|_| invalid(name.clone(), "references unknown bus"))?;
            if bus.kind == BusKind::Pq {
                return Err(invalid(name, "attached to a PQ bus"));
            }
            if !(g.mva_base > 0.0) {
                return Err(invalid(name, "mva_base must be positive"));
            }
        }
        for bus in self.buses.iter().filter(|b| b.kind != BusKind::Pq) {
            if !self.generators.iter().any(|g| g.bus == bus.id) {
                return Err(invalid(format!("bus {}", bus.id), "voltage-controlled bus has no generator"));
            }
        }
        if let Some(island) = self.first_unreached_bus() {
            return Err(invalid(format!("bus {island}"), "network is not connected"));
        }
        Ok(())
    }

    /// Breadth-first search from the first bus; returns a bus it cannot reach.
    fn first_unreached_bus(&self) -> Option<BusId> {
        let n = self.buses.len();
        if n == 0 {
            return None;
        }
        let adj = self.adjacency();
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.iter().position(|s| !s).map(|i| self.buses[i].id)
    }

    pub fn is_connected(&self) -> bool {
        self.first_unreached_bus().is_none()
    }

    /// Neighbour lists by bus index.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.buses.len()];
        for br in &self.branches {
            let (i, j) = (self.index[&br.from], self.index[&br.to]);
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }

    pub fn bus_index(&self, id: BusId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn bus(&self, id: BusId) -> Result<&Bus, NetError> {
        self.bus_index(id).map(|i| &self.buses[i]).ok_or(NetError::UnknownBus(id))
    }

    pub fn slack_index(&self) -> usize {
        self.buses.iter().position(|b| b.kind == BusKind::Slack).expect("validated network has a slack bus")
    }

    pub fn generators_at(&self, id: BusId) -> impl Iterator<Item = &GeneratorSpec> {
        self.generators.iter().filter(move |g| g.bus == id)
    }

    pub fn total_load(&self) -> (f64, f64) {
        self.buses.iter().fold((0.0, 0.0), |(p, q), b| (p + b.p_load, q + b.q_load))
    }

    /// Hangs a new PQ leaf bus off `host` through a spur whose impedance is
    /// `length_km * ohm_per_km`, converted on the host's voltage base.
    pub fn attach_spur(
        &self,
        host: BusId,
        length_km: f64,
        ohm_per_km: Complex64,
        kind: AttachmentKind,
    ) -> Result<(Network, BusId), NetError> {
        let host_bus = self.bus(host)?;
        if !(length_km >= 0.0) {
            return Err(invalid(format!("spur at bus {host}"), format!("length must be >= 0 km, got {length_km}")));
        }
        let zb = units::base_impedance_ohm(host_bus.base_kv, self.s_base);
        let mut z = ohm_per_km * length_km / zb;
        if z.norm() < MIN_BRANCH_IMPEDANCE_PU {
            z = if z.norm() > 0.0 {
                z * (MIN_BRANCH_IMPEDANCE_PU / z.norm())
            } else {
                Complex64::new(0.0, MIN_BRANCH_IMPEDANCE_PU)
            };
        }
        if z.im == 0.0 {
            z.im = MIN_BRANCH_IMPEDANCE_PU;
        }
        let leaf = self.buses.iter().map(|b| b.id).max().unwrap_or(0) + 1;
        let mut buses = self.buses.clone();
        buses.push(Bus {
            id: leaf,
            kind: BusKind::Pq,
            base_kv: host_bus.base_kv,
            v_mag: 1.0,
            v_ang: 0.0,
            p_load: 0.0,
            q_load: 0.0,
        });
        let mut branches = self.branches.clone();
        branches.push(Branch {
            from: host,
            to: leaf,
            r: z.re,
            x: z.im,
            b_shunt: 0.0,
            rating: None,
        });
        let mut attachments = self.attachments.clone();
        attachments.push(Attachment {
            kind,
            host,
            leaf,
            length_km,
        });
        let net = Network::new(
            self.name.clone(),
            self.f_sys,
            self.s_base,
            buses,
            branches,
            self.generators.clone(),
            attachments,
        )?;
        Ok((net, leaf))
    }

    /// Copy with every bus load multiplied by `factor`.
    pub fn with_scaled_load(&self, factor: f64) -> Network {
        let mut net = self.clone();
        for b in &mut net.buses {
            b.p_load *= factor;
            b.q_load *= factor;
        }
        net
    }

    /// Copy with the constant load at one bus replaced.
    pub fn with_bus_load(&self, id: BusId, p: f64, q: f64) -> Result<Network, NetError> {
        let i = self.bus_index(id).ok_or(NetError::UnknownBus(id))?;
        let mut net = self.clone();
        net.buses[i].p_load = p;
        net.buses[i].q_load = q;
        Ok(net)
    }
}
