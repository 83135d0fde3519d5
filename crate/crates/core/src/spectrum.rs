//! Domain types shared by every other module: bands, priorities, demands,
//! allocations and plans.
//!
//! Frequencies are integer MHz. Intervals are half-open: an allocation
//! occupies `[start_mhz, start_mhz + width_mhz)`.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ValidationError;

/// Simulation time in integer milliseconds.
pub type SimTime = u64;

/// A contiguous frequency range divided into channels of `grid_mhz`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawBand")]
pub struct Band {
    lo_mhz: u32,
    hi_mhz: u32,
    grid_mhz: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBand {
    lo_mhz: u32,
    hi_mhz: u32,
    grid_mhz: u32,
}

impl TryFrom<RawBand> for Band {
    type Error = ValidationError;

    fn try_from(raw: RawBand) -> Result<Self, Self::Error> {
        Band::new(raw.lo_mhz, raw.hi_mhz, raw.grid_mhz)
    }
}

impl Band {
    pub fn new(lo_mhz: u32, hi_mhz: u32, grid_mhz: u32) -> Result<Self, ValidationError> {
        if grid_mhz == 0 {
            return Err(ValidationError::new("band grid_mhz must be positive"));
        }
        if lo_mhz >= hi_mhz {
            return Err(ValidationError::new(format!(
                "band lo_mhz {lo_mhz} must be below hi_mhz {hi_mhz}"
            )));
        }
        if (hi_mhz - lo_mhz) % grid_mhz != 0 {
            return Err(ValidationError::new(format!(
                "band width {} is not a multiple of grid {grid_mhz}",
                hi_mhz - lo_mhz
            )));
        }
        Ok(Self { lo_mhz, hi_mhz, grid_mhz })
    }

    /// The 3.7–3.8 GHz overlayer band on a 1 MHz grid.
    pub fn overlayer() -> Self {
        Self { lo_mhz: 3700, hi_mhz: 3800, grid_mhz: 1 }
    }

    pub fn lo_mhz(&self) -> u32 {
        self.lo_mhz
    }

    pub fn hi_mhz(&self) -> u32 {
        self.hi_mhz
    }

    pub fn grid_mhz(&self) -> u32 {
        self.grid_mhz
    }

    pub fn width_mhz(&self) -> u32 {
        self.hi_mhz - self.lo_mhz
    }

    pub fn channels(&self) -> u32 {
        self.width_mhz() / self.grid_mhz
    }

    pub fn is_on_grid(&self, mhz: u32) -> bool {
        mhz % self.grid_mhz == 0
    }

    pub fn contains(&self, start_mhz: u32, width_mhz: u32) -> bool {
        start_mhz >= self.lo_mhz
            && start_mhz
                .checked_add(width_mhz)
                .is_some_and(|end| end <= self.hi_mhz)
    }
}

impl Default for Band {
    fn default() -> Self {
        Self::overlayer()
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}) MHz @ {} MHz", self.lo_mhz, self.hi_mhz, self.grid_mhz)
    }
}

/// QoS class of a sub-network. Smaller level is strictly more important.
///
/// Level 0 is mission-critical control, 1 nomadic logistics, 2 sensing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct QosPriority(u8);

impl QosPriority {
    pub const CONTROL: QosPriority = QosPriority(0);
    pub const NOMADIC: QosPriority = QosPriority(1);
    pub const SENSING: QosPriority = QosPriority(2);
    pub const LOWEST: u8 = 2;

    pub fn new(level: u8) -> Result<Self, ValidationError> {
        if level > Self::LOWEST {
            return Err(ValidationError::new(format!(
                "priority level {level} outside 0..={}",
                Self::LOWEST
            )));
        }
        Ok(Self(level))
    }

    pub fn level(self) -> u8 {
        self.0
    }

    /// Allocations at this level keep their start frequency across epochs.
    pub fn is_sticky(self) -> bool {
        self.0 == 0
    }
}

impl TryFrom<u8> for QosPriority {
    type Error = ValidationError;

    fn try_from(level: u8) -> Result<Self, Self::Error> {
        Self::new(level)
    }
}

impl From<QosPriority> for u8 {
    fn from(p: QosPriority) -> u8 {
        p.0
    }
}

impl fmt::Display for QosPriority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.0)
    }
}

/// Frequency requirements registered by a sub-network controller.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawDemand")]
pub struct DemandProfile {
    pub sn_id: String,
    pub priority: QosPriority,
    pub min_bw_mhz: u32,
    pub pref_bw_mhz: u32,
    #[serde(default)]
    pub registered_at: SimTime,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDemand {
    sn_id: String,
    priority: QosPriority,
    min_bw_mhz: u32,
    pref_bw_mhz: u32,
    #[serde(default)]
    registered_at: SimTime,
}

impl TryFrom<RawDemand> for DemandProfile {
    type Error = ValidationError;

    fn try_from(raw: RawDemand) -> Result<Self, Self::Error> {
        DemandProfile::new(
            raw.sn_id,
            raw.priority,
            raw.min_bw_mhz,
            raw.pref_bw_mhz,
            raw.registered_at,
        )
    }
}

impl DemandProfile {
    pub fn new(
        sn_id: impl Into<String>,
        priority: QosPriority,
        min_bw_mhz: u32,
        pref_bw_mhz: u32,
        registered_at: SimTime,
    ) -> Result<Self, ValidationError> {
        let sn_id = sn_id.into();
        if sn_id.is_empty() {
            return Err(ValidationError::new("demand sn_id must not be empty"));
        }
        if min_bw_mhz == 0 || min_bw_mhz > pref_bw_mhz {
            return Err(ValidationError::new(format!(
                "demand {sn_id}: need 0 < min_bw_mhz ({min_bw_mhz}) <= pref_bw_mhz ({pref_bw_mhz})"
            )));
        }
        Ok(Self { sn_id, priority, min_bw_mhz, pref_bw_mhz, registered_at })
    }

    /// Checks the band-dependent invariants: grid alignment and fit.
    pub fn check_against(&self, band: &Band) -> Result<(), ValidationError> {
        if self.pref_bw_mhz > band.width_mhz() {
            return Err(ValidationError::new(format!(
                "demand {}: pref_bw_mhz {} exceeds band width {}",
                self.sn_id,
                self.pref_bw_mhz,
                band.width_mhz()
            )));
        }
        if !band.is_on_grid(self.min_bw_mhz) || !band.is_on_grid(self.pref_bw_mhz) {
            return Err(ValidationError::new(format!(
                "demand {}: bandwidths must be multiples of {} MHz",
                self.sn_id,
                band.grid_mhz()
            )));
        }
        Ok(())
    }

    /// Same requirement, ignoring registration time.
    pub fn same_requirement(&self, other: &DemandProfile) -> bool {
        self.sn_id == other.sn_id
            && self.priority == other.priority
            && self.min_bw_mhz == other.min_bw_mhz
            && self.pref_bw_mhz == other.pref_bw_mhz
    }
}

/// A contiguous block granted to one sub-network for one plan epoch.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpectrumAllocation {
    pub sn_id: String,
    pub start_mhz: u32,
    pub width_mhz: u32,
    pub priority: QosPriority,
    pub pinned: bool,
    pub epoch: u64,
}

impl SpectrumAllocation {
    pub fn end_mhz(&self) -> u32 {
        self.start_mhz + self.width_mhz
    }

    /// Same block, ignoring epoch and pin metadata.
    pub fn same_block(&self, other: &SpectrumAllocation) -> bool {
        self.sn_id == other.sn_id
            && self.start_mhz == other.start_mhz
            && self.width_mhz == other.width_mhz
    }
}

impl fmt::Display for SpectrumAllocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} [{}, {}) {}",
            self.sn_id,
            self.start_mhz,
            self.end_mhz(),
            self.priority
        )
    }
}

/// Signed spectral gap between two blocks; negative when they intersect.
pub fn gap_mhz(a: &SpectrumAllocation, b: &SpectrumAllocation) -> i64 {
    let (a0, a1) = (i64::from(a.start_mhz), i64::from(a.end_mhz()));
    let (b0, b1) = (i64::from(b.start_mhz), i64::from(b.end_mhz()));
    (b0 - a1).max(a0 - b1)
}

/// True iff the two blocks are closer than `guard_mhz` (or intersect).
pub fn overlaps(a: &SpectrumAllocation, b: &SpectrumAllocation, guard_mhz: u32) -> bool {
    gap_mhz(a, b) < i64::from(guard_mhz)
}

/// One committed (or proposed) assignment of the band.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub epoch: u64,
    /// Sorted by `start_mhz`.
    pub allocations: Vec<SpectrumAllocation>,
    pub rejected: Vec<String>,
}

impl AllocationPlan {
    pub fn empty(epoch: u64) -> Self {
        Self { epoch, allocations: Vec::new(), rejected: Vec::new() }
    }

    pub fn get(&self, sn_id: &str) -> Option<&SpectrumAllocation> {
        self.allocations.iter().find(|a| a.sn_id == sn_id)
    }

    pub fn total_width_mhz(&self) -> u32 {
        self.allocations.iter().map(|a| a.width_mhz).sum()
    }

    /// True when both plans assign the same blocks (epochs ignored).
    pub fn same_layout(&self, other: &AllocationPlan) -> bool {
        self.allocations.len() == other.allocations.len()
            && self
                .allocations
                .iter()
                .zip(&other.allocations)
                .all(|(a, b)| a.same_block(b))
    }

    /// Checks the structural plan invariants: in-band, on-grid, guard
    /// separation, and unique sn_ids across allocations and rejections.
    /// When `demands` is given, every width must lie in `[min, pref]`.
    pub fn validate(
        &self,
        band: &Band,
        guard_mhz: u32,
        demands: Option<&[DemandProfile]>,
    ) -> Result<(), ValidationError> {
        let mut seen = BTreeSet::new();
        for a in &self.allocations {
            if a.width_mhz == 0 {
                return Err(ValidationError::new(format!("{a}: zero width")));
            }
            if !band.contains(a.start_mhz, a.width_mhz) {
                return Err(ValidationError::new(format!("{a}: outside band {band}")));
            }
            if !band.is_on_grid(a.start_mhz - band.lo_mhz()) || !band.is_on_grid(a.width_mhz) {
                return Err(ValidationError::new(format!("{a}: off grid")));
            }
            if !seen.insert(a.sn_id.as_str()) {
                return Err(ValidationError::new(format!("{}: allocated twice", a.sn_id)));
            }
            if let Some(demands) = demands {
                let d = demands
                    .iter()
                    .find(|d| d.sn_id == a.sn_id)
                    .ok_or_else(|| ValidationError::new(format!("{}: no demand", a.sn_id)))?;
                if a.width_mhz < d.min_bw_mhz || a.width_mhz > d.pref_bw_mhz {
                    return Err(ValidationError::new(format!(
                        "{a}: width outside [{}, {}]",
                        d.min_bw_mhz, d.pref_bw_mhz
                    )));
                }
            }
        }
        for r in &self.rejected {
            if !seen.insert(r.as_str()) {
                return Err(ValidationError::new(format!("{r}: listed twice")));
            }
        }
        for (i, a) in self.allocations.iter().enumerate() {
            for b in &self.allocations[i + 1..] {
                if overlaps(a, b, guard_mhz) {
                    return Err(ValidationError::new(format!(
                        "{a} and {b} violate guard {guard_mhz} MHz"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Fraction of the band covered by allocations, in `[0, 1]`.
pub fn plan_utilization(plan: &AllocationPlan, band: &Band) -> f64 {
    f64::from(plan.total_width_mhz()) / f64::from(band.width_mhz())
}
