//! Deterministic spectrum allocation engine.
//!
//! A plan is computed from scratch on every call:
//!
//! 1. **Admission.** Demands are walked in [`admission_order`]. Pinned
//!    (priority-0, previously committed) demands are always admitted. Any
//!    other demand is admitted iff the admitted minimums plus guards still
//!    fit, both in aggregate and as a packing into the free segments left
//!    between pinned blocks.
//! 2. **Sizing.** Free capacity is water-filled in admission order: each
//!    demand gets `min(pref - min, leftover)` on top of its minimum.
//! 3. **Layout.** Pinned blocks stay at their start and may only grow to the
//!    right. Other blocks are packed left-to-right in admission order inside
//!    their segment, separated by the guard.
//!
//! Without pinned blocks there is a single segment spanning the band, and
//! the procedure reduces to aggregate admission followed by one global
//! water-fill and contiguous packing.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::ValidationError;
use crate::spectrum::{AllocationPlan, Band, DemandProfile, SpectrumAllocation};

/// Guard band between allocations of distinct sub-networks.
pub const DEFAULT_GUARD_MHZ: u32 = 1;

/// Upper bound on segment assignments scored during layout. Larger
/// instances fall back to the first feasible (lowest-frequency) assignment.
const ASSIGNMENT_BUDGET: usize = 50_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocatorInput {
    pub band: Band,
    pub guard_mhz: u32,
    pub demands: Vec<DemandProfile>,
    /// Previously committed priority-0 blocks that keep their start.
    #[serde(default)]
    pub pinned: Vec<SpectrumAllocation>,
    #[serde(default)]
    pub prev_epoch: u64,
}

impl AllocatorInput {
    pub fn new(band: Band, guard_mhz: u32, demands: Vec<DemandProfile>) -> Self {
        Self { band, guard_mhz, demands, pinned: Vec::new(), prev_epoch: 0 }
    }

    pub fn with_pinned(mut self, pinned: Vec<SpectrumAllocation>) -> Self {
        self.pinned = pinned;
        self
    }

    pub fn with_prev_epoch(mut self, prev_epoch: u64) -> Self {
        self.prev_epoch = prev_epoch;
        self
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let band = &self.band;
        if !band.is_on_grid(self.guard_mhz) {
            return Err(ValidationError::new(format!(
                "guard {} MHz is not a multiple of grid {}",
                self.guard_mhz,
                band.grid_mhz()
            )));
        }
        admission_order(&self.demands)?;
        for d in &self.demands {
            d.check_against(band)?;
        }
        let mut seen = BTreeSet::new();
        for p in &self.pinned {
            if !seen.insert(p.sn_id.as_str()) {
                return Err(ValidationError::new(format!("{}: pinned twice", p.sn_id)));
            }
            let demand = self
                .demands
                .iter()
                .find(|d| d.sn_id == p.sn_id)
                .ok_or_else(|| ValidationError::new(format!("pinned {} has no demand", p.sn_id)))?;
            if !demand.priority.is_sticky() {
                return Err(ValidationError::new(format!(
                    "pinned {} has priority {}, only level 0 may be pinned",
                    p.sn_id, demand.priority
                )));
            }
            if p.width_mhz < demand.min_bw_mhz {
                return Err(ValidationError::new(format!(
                    "pinned {p}: width below demand min {}",
                    demand.min_bw_mhz
                )));
            }
            if !band.contains(p.start_mhz, p.width_mhz)
                || !band.is_on_grid(p.start_mhz - band.lo_mhz())
                || !band.is_on_grid(p.width_mhz)
            {
                return Err(ValidationError::new(format!("pinned {p}: outside band or off grid")));
            }
        }
        let pinned_plan = AllocationPlan {
            epoch: 0,
            allocations: sorted_by_start(self.pinned.clone()),
            rejected: Vec::new(),
        };
        pinned_plan.validate(band, self.guard_mhz, None)
    }
}

/// Sorts demands by `(priority, registered_at, sn_id)`.
pub fn admission_order(demands: &[DemandProfile]) -> Result<Vec<&DemandProfile>, ValidationError> {
    let mut ids = BTreeSet::new();
    for d in demands {
        if !ids.insert(d.sn_id.as_str()) {
            return Err(ValidationError::new(format!("duplicate sn_id {}", d.sn_id)));
        }
    }
    let mut ordered: Vec<&DemandProfile> = demands.iter().collect();
    ordered.sort_by(|a, b| {
        (a.priority, a.registered_at, &a.sn_id).cmp(&(b.priority, b.registered_at, &b.sn_id))
    });
    Ok(ordered)
}

/// Priority weight used to score plans: `4^(2 - level)`.
pub fn priority_weight(demand: &DemandProfile) -> u64 {
    4u64.pow(u32::from(2 - demand.priority.level()))
}

/// Computes the next plan. See the module docs for the procedure.
pub fn compute_plan(input: &AllocatorInput) -> Result<AllocationPlan, ValidationError> {
    input.validate()?;
    let order = admission_order(&input.demands)?;
    let ctx = Layout::new(input, &order);

    // Admission.
    let mut admitted: Vec<usize> = Vec::new();
    let mut rejected = Vec::new();
    for (pos, demand) in order.iter().enumerate() {
        if ctx.pinned_of[pos].is_some() {
            admitted.push(pos);
            continue;
        }
        admitted.push(pos);
        if !ctx.aggregate_fits(&admitted) || ctx.first_assignment(&admitted).is_none() {
            admitted.pop();
            rejected.push(demand.sn_id.clone());
        }
    }

    // Sizing and layout.
    let assignment = ctx.best_assignment(&admitted);
    let widths = ctx.water_fill(&admitted, &assignment);
    let epoch = input.prev_epoch + 1;
    let allocations = ctx.place(&admitted, &assignment, &widths, epoch);

    Ok(AllocationPlan { epoch, allocations, rejected })
}

fn sorted_by_start(mut allocations: Vec<SpectrumAllocation>) -> Vec<SpectrumAllocation> {
    allocations.sort_by(|a, b| (a.start_mhz, &a.sn_id).cmp(&(b.start_mhz, &b.sn_id)));
    allocations
}

/// Free space between consecutive pinned blocks (at their minimum widths).
#[derive(Debug, Clone)]
struct Segment {
    /// Position (in admission order) of the pinned block on the left.
    left: Option<usize>,
    has_right: bool,
    /// First free MHz: band edge, or the left pinned block's start + min.
    lo: u32,
    /// Band edge, or the right pinned block's start.
    hi: u32,
}

impl Segment {
    fn space(&self) -> u64 {
        u64::from(self.hi - self.lo)
    }

    /// Guards needed for `items` unpinned blocks plus the pinned ends.
    fn guards(&self, items: usize, guard: u32) -> u64 {
        let blocks = items + usize::from(self.left.is_some()) + usize::from(self.has_right);
        blocks.saturating_sub(1) as u64 * u64::from(guard)
    }
}

struct Layout<'a> {
    band: Band,
    guard: u32,
    order: &'a [&'a DemandProfile],
    /// Pinned start frequency per admission position.
    pinned_of: Vec<Option<u32>>,
    segments: Vec<Segment>,
    /// Segment to the right of each pinned block, per admission position.
    right_segment: Vec<Option<usize>>,
}

impl<'a> Layout<'a> {
    fn new(input: &'a AllocatorInput, order: &'a [&'a DemandProfile]) -> Self {
        let pinned_of: Vec<Option<u32>> = order
            .iter()
            .map(|d| input.pinned.iter().find(|p| p.sn_id == d.sn_id).map(|p| p.start_mhz))
            .collect();
        let mut pins: Vec<(u32, usize)> = pinned_of
            .iter()
            .enumerate()
            .filter_map(|(pos, s)| s.map(|s| (s, pos)))
            .collect();
        pins.sort_unstable();

        let mut segments = Vec::with_capacity(pins.len() + 1);
        let mut right_segment = vec![None; order.len()];
        let mut lo = input.band.lo_mhz();
        let mut left = None;
        for &(start, pos) in &pins {
            segments.push(Segment { left, has_right: true, lo, hi: start });
            right_segment[pos] = Some(segments.len());
            lo = start + order[pos].min_bw_mhz;
            left = Some(pos);
        }
        segments.push(Segment { left, has_right: false, lo, hi: input.band.hi_mhz() });

        Self { band: input.band, guard: input.guard_mhz, order, pinned_of, segments, right_segment }
    }

    fn aggregate_fits(&self, admitted: &[usize]) -> bool {
        let mins: u64 = admitted.iter().map(|&p| u64::from(self.order[p].min_bw_mhz)).sum();
        let guards = admitted.len().saturating_sub(1) as u64 * u64::from(self.guard);
        mins + guards <= u64::from(self.band.width_mhz())
    }

    fn unpinned(&self, admitted: &[usize]) -> Vec<usize> {
        admitted.iter().copied().filter(|&p| self.pinned_of[p].is_none()).collect()
    }

    /// Lowest (lexicographic, admission order) feasible segment assignment
    /// of the admitted unpinned demands at their minimum widths.
    fn first_assignment(&self, admitted: &[usize]) -> Option<Vec<usize>> {
        let items = self.unpinned(admitted);
        let mut used = vec![0u64; self.segments.len()];
        let mut counts = vec![0usize; self.segments.len()];
        let mut assignment = Vec::with_capacity(items.len());
        if self.search_first(&items, &mut used, &mut counts, &mut assignment) {
            Some(assignment)
        } else {
            None
        }
    }

    fn fits(&self, seg: usize, used: u64, count: usize) -> bool {
        let s = &self.segments[seg];
        used + s.guards(count, self.guard) <= s.space()
    }

    fn search_first(
        &self,
        items: &[usize],
        used: &mut [u64],
        counts: &mut [usize],
        assignment: &mut Vec<usize>,
    ) -> bool {
        let Some((&item, rest)) = items.split_first() else {
            return true;
        };
        let min = u64::from(self.order[item].min_bw_mhz);
        for seg in 0..self.segments.len() {
            if !self.fits(seg, used[seg] + min, counts[seg] + 1) {
                continue;
            }
            used[seg] += min;
            counts[seg] += 1;
            assignment.push(seg);
            if self.search_first(rest, used, counts, assignment) {
                return true;
            }
            assignment.pop();
            used[seg] -= min;
            counts[seg] -= 1;
        }
        false
    }

    /// Feasible assignment whose water-filled widths score best: highest
    /// priority-weighted total width, then the lexicographically largest
    /// width vector in admission order, then the lowest assignment.
    fn best_assignment(&self, admitted: &[usize]) -> Vec<usize> {
        let items = self.unpinned(admitted);
        let first = self.first_assignment(admitted).unwrap_or_default();
        let search_space = self.segments.len().checked_pow(items.len() as u32);
        if self.segments.len() == 1 || search_space.is_none_or(|n| n > ASSIGNMENT_BUDGET) {
            return first;
        }

        let mut best: Option<(u64, Vec<u32>, Vec<usize>)> = None;
        let mut used = vec![0u64; self.segments.len()];
        let mut counts = vec![0usize; self.segments.len()];
        let mut assignment = Vec::with_capacity(items.len());
        self.search_all(&items, &mut used, &mut counts, &mut assignment, &mut |assignment| {
            let widths = self.water_fill(admitted, assignment);
            let score: u64 = admitted
                .iter()
                .zip(&widths)
                .map(|(&p, &w)| priority_weight(self.order[p]) * u64::from(w))
                .sum();
            let better = match &best {
                None => true,
                Some((s, w, _)) => (score, &widths) > (*s, w),
            };
            if better {
                best = Some((score, widths, assignment.to_vec()));
            }
        });
        best.map(|(_, _, a)| a).unwrap_or(first)
    }

    fn search_all(
        &self,
        items: &[usize],
        used: &mut [u64],
        counts: &mut [usize],
        assignment: &mut Vec<usize>,
        visit: &mut dyn FnMut(&[usize]),
    ) {
        let Some((&item, rest)) = items.split_first() else {
            visit(assignment);
            return;
        };
        let min = u64::from(self.order[item].min_bw_mhz);
        for seg in 0..self.segments.len() {
            if !self.fits(seg, used[seg] + min, counts[seg] + 1) {
                continue;
            }
            used[seg] += min;
            counts[seg] += 1;
            assignment.push(seg);
            self.search_all(rest, used, counts, assignment, visit);
            assignment.pop();
            used[seg] -= min;
            counts[seg] -= 1;
        }
    }

    /// Segment each admitted demand draws its extra bandwidth from.
    fn segment_of(&self, admitted: &[usize], assignment: &[usize]) -> Vec<usize> {
        let mut next = assignment.iter();
        admitted
            .iter()
            .map(|&p| match self.right_segment[p] {
                Some(seg) => seg,
                None => *next.next().expect("assignment covers unpinned demands"),
            })
            .collect()
    }

    /// Widths per admitted demand (same order as `admitted`).
    fn water_fill(&self, admitted: &[usize], assignment: &[usize]) -> Vec<u32> {
        let seg_of = self.segment_of(admitted, assignment);
        let mut mins = vec![0u64; self.segments.len()];
        let mut counts = vec![0usize; self.segments.len()];
        for (&p, &seg) in admitted.iter().zip(&seg_of) {
            if self.pinned_of[p].is_none() {
                mins[seg] += u64::from(self.order[p].min_bw_mhz);
                counts[seg] += 1;
            }
        }
        let mut slack: Vec<u64> = self
            .segments
            .iter()
            .enumerate()
            .map(|(i, s)| s.space().saturating_sub(mins[i] + s.guards(counts[i], self.guard)))
            .collect();
        admitted
            .iter()
            .zip(&seg_of)
            .map(|(&p, &seg)| {
                let d = self.order[p];
                let extra = u64::from(d.pref_bw_mhz - d.min_bw_mhz).min(slack[seg]);
                slack[seg] -= extra;
                d.min_bw_mhz + extra as u32
            })
            .collect()
    }

    fn place(
        &self,
        admitted: &[usize],
        assignment: &[usize],
        widths: &[u32],
        epoch: u64,
    ) -> Vec<SpectrumAllocation> {
        let seg_of = self.segment_of(admitted, assignment);
        let make = |p: usize, start: u32, width: u32| {
            let d = self.order[p];
            SpectrumAllocation {
                sn_id: d.sn_id.clone(),
                start_mhz: start,
                width_mhz: width,
                priority: d.priority,
                pinned: d.priority.is_sticky(),
                epoch,
            }
        };
        let mut out = Vec::with_capacity(admitted.len());
        for (i, seg) in self.segments.iter().enumerate() {
            let mut cursor = match seg.left {
                Some(left) => {
                    let k = admitted.iter().position(|&p| p == left).expect("pinned admitted");
                    let start = self.pinned_of[left].expect("pinned start");
                    out.push(make(left, start, widths[k]));
                    start + widths[k] + self.guard
                }
                None => seg.lo,
            };
            for (k, &p) in admitted.iter().enumerate() {
                if self.pinned_of[p].is_none() && seg_of[k] == i {
                    out.push(make(p, cursor, widths[k]));
                    cursor += widths[k] + self.guard;
                }
            }
        }
        sorted_by_start(out)
    }
}
