//! Exhaustive reference allocator for tiny instances.
//!
//! Enumerates every admission subset, every on-grid width vector and every
//! left-to-right block order, and keeps the plan that is best under:
//! 1. admission (lexicographic in admission order, earlier demands dominate),
//! 2. priority-weighted total width, weight `4^(2 - level)`,
//! 3. width vector in admission order (larger first),
//! 4. start vector in admission order (lower first).
//!
//! Shares no code with the production allocator beyond the plain data types.

use nin_dsm_core::spectrum::{AllocationPlan, DemandProfile, SpectrumAllocation};
use nin_dsm_core::allocator::AllocatorInput;

pub const MAX_DEMANDS: usize = 4;
pub const MAX_CHANNELS: u32 = 12;

#[derive(Debug)]
pub struct TooLarge;

fn sorted(demands: &[DemandProfile]) -> Vec<DemandProfile> {
    let mut v = demands.to_vec();
    v.sort_by(|a, b| {
        (a.priority.level(), a.registered_at, a.sn_id.clone())
            .cmp(&(b.priority.level(), b.registered_at, b.sn_id.clone()))
    });
    v
}

fn weight(d: &DemandProfile) -> u64 {
    match d.priority.level() {
        0 => 16,
        1 => 4,
        _ => 1,
    }
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.is_empty() {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

struct Ctx<'a> {
    lo: u32,
    hi: u32,
    guard: u32,
    demands: &'a [DemandProfile],
    pinned: Vec<Option<u32>>,
}

impl Ctx<'_> {
    /// Leftmost placement for a fixed block order; starts indexed by demand.
    fn place(&self, perm: &[usize], widths: &[u32]) -> Option<Vec<u32>> {
        let mut starts = vec![0u32; self.demands.len()];
        let mut cursor: Option<u32> = None; // earliest start for next block
        for &i in perm {
            let earliest = cursor.unwrap_or(self.lo);
            let start = match self.pinned[i] {
                Some(s) if s >= earliest => s,
                Some(_) => return None,
                None => earliest,
            };
            let end = start + widths[i];
            if end > self.hi {
                return None;
            }
            starts[i] = start;
            cursor = Some(end + self.guard);
        }
        Some(starts)
    }

    /// Lowest start vector (admission order) over all block orders.
    fn best_starts(&self, members: &[usize], widths: &[u32]) -> Option<Vec<u32>> {
        permutations(members)
            .iter()
            .filter_map(|perm| self.place(perm, widths))
            .map(|starts| members.iter().map(|&i| starts[i]).collect::<Vec<_>>())
            .min()
            .map(|compact| {
                let mut full = vec![0u32; self.demands.len()];
                for (k, &i) in members.iter().enumerate() {
                    full[i] = compact[k];
                }
                full
            })
    }

    fn feasible(&self, members: &[usize], widths: &[u32]) -> bool {
        permutations(members).iter().any(|perm| self.place(perm, widths).is_some())
    }
}

pub fn oracle_plan(input: &AllocatorInput) -> Result<AllocationPlan, TooLarge> {
    let band = input.band;
    if input.demands.len() > MAX_DEMANDS || band.channels() > MAX_CHANNELS {
        return Err(TooLarge);
    }
    let demands = sorted(&input.demands);
    let n = demands.len();
    let ctx = Ctx {
        lo: band.lo_mhz(),
        hi: band.hi_mhz(),
        guard: input.guard_mhz,
        demands: &demands,
        pinned: demands
            .iter()
            .map(|d| input.pinned.iter().find(|p| p.sn_id == d.sn_id).map(|p| p.start_mhz))
            .collect(),
    };
    let mins: Vec<u32> = demands.iter().map(|d| d.min_bw_mhz).collect();

    // (1) admission: a mask whose bit for demand 0 is the most significant.
    let mut best_mask: Option<u32> = None;
    let mut best_key = 0u32;
    for mask in 0u32..(1 << n) {
        let members: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        if (0..n).any(|i| ctx.pinned[i].is_some() && !members.contains(&i)) {
            continue;
        }
        if !ctx.feasible(&members, &mins) {
            continue;
        }
        let key: u32 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| 1 << (n - 1 - i)).sum();
        if best_mask.is_none() || key > best_key {
            best_mask = Some(mask);
            best_key = key;
        }
    }
    let mask = best_mask.unwrap_or(0);
    let members: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();

    // (2)-(4) widths, then starts.
    let grid = band.grid_mhz();
    let mut best: Option<(u64, Vec<u32>, Vec<u32>)> = None; // score, widths(members), starts
    let mut widths = mins.clone();
    fn recurse(
        k: usize,
        members: &[usize],
        demands: &[DemandProfile],
        grid: u32,
        widths: &mut Vec<u32>,
        visit: &mut dyn FnMut(&[u32]),
    ) {
        if k == members.len() {
            visit(widths);
            return;
        }
        let i = members[k];
        let mut w = demands[i].min_bw_mhz;
        while w <= demands[i].pref_bw_mhz {
            widths[i] = w;
            recurse(k + 1, members, demands, grid, widths, visit);
            w += grid;
        }
        widths[i] = demands[i].min_bw_mhz;
    }
    recurse(0, &members, &demands, grid, &mut widths, &mut |widths| {
        let Some(starts) = ctx.best_starts(&members, widths) else {
            return;
        };
        let score: u64 = members.iter().map(|&i| weight(&demands[i]) * u64::from(widths[i])).sum();
        let wv: Vec<u32> = members.iter().map(|&i| widths[i]).collect();
        let sv: Vec<u32> = members.iter().map(|&i| starts[i]).collect();
        let better = match &best {
            None => true,
            Some((s, bw, bs)) => {
                score > *s || (score == *s && (wv > *bw || (wv == *bw && sv < *bs)))
            }
        };
        if better {
            best = Some((score, wv, sv));
        }
    });

    let epoch = input.prev_epoch + 1;
    let mut allocations = Vec::new();
    if let Some((_, wv, sv)) = best {
        for (k, &i) in members.iter().enumerate() {
            let d = &demands[i];
            allocations.push(SpectrumAllocation {
                sn_id: d.sn_id.clone(),
                start_mhz: sv[k],
                width_mhz: wv[k],
                priority: d.priority,
                pinned: d.priority.level() == 0,
                epoch,
            });
        }
    }
    allocations.sort_by_key(|a| a.start_mhz);
    let rejected = (0..n)
        .filter(|i| mask & (1 << i) == 0)
        .map(|i| demands[i].sn_id.clone())
        .collect();
    Ok(AllocationPlan { epoch, allocations, rejected })
}

/// Priority-weighted total width of a plan.
pub fn weighted_score(plan: &AllocationPlan) -> u64 {
    plan.allocations
        .iter()
        .map(|a| {
            let w = match a.priority.level() {
                0 => 16,
                1 => 4,
                _ => 1,
            };
            w * u64::from(a.width_mhz)
        })
        .sum()
}
