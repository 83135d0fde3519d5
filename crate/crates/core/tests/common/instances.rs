//! Enumerated small allocator instances on a 12-channel band
//! ([0, 60) MHz at a 5 MHz grid, 5 MHz guard).

use nin_dsm_core::allocator::{compute_plan, AllocatorInput};
use nin_dsm_core::spectrum::{Band, DemandProfile, QosPriority, SpectrumAllocation};

pub const GRID: u32 = 5;
pub const GUARD: u32 = 5;

pub fn small_band() -> Band {
    Band::new(0, 60, GRID).unwrap()
}

fn demand(sn: &str, level: u8, min_units: u32, pref_units: u32, t: u64) -> DemandProfile {
    DemandProfile::new(sn, QosPriority::new(level).unwrap(), min_units * GRID, pref_units * GRID, t)
        .unwrap()
}

fn pairs(units: &[u32]) -> Vec<(u32, u32)> {
    let mut out = Vec::new();
    for &a in units {
        for &b in units {
            if a <= b {
                out.push((a, b));
            }
        }
    }
    out
}

pub struct Instance {
    pub input: AllocatorInput,
    pub pinned: bool,
}

fn unpinned(demands: Vec<DemandProfile>) -> Instance {
    Instance { input: AllocatorInput::new(small_band(), GUARD, demands), pinned: false }
}

/// Every instance of the enumeration. Unpinned families cover all min/pref
/// combinations for two demands and grid subsets for three and four;
/// pinned families place priority-0 blocks at several fixed starts.
pub fn enumerate() -> Vec<Instance> {
    let mut out = Vec::new();
    let all: Vec<u32> = (1..=12).collect();
    let all_pairs = pairs(&all);

    for levels in [(0u8, 1u8), (1, 1), (2, 1)] {
        for &(m1, p1) in &all_pairs {
            for &(m2, p2) in &all_pairs {
                out.push(unpinned(vec![
                    demand("A", levels.0, m1, p1, 0),
                    demand("B", levels.1, m2, p2, 1),
                ]));
            }
        }
    }

    let mid = pairs(&[1, 2, 4, 6, 9]);
    for &(m1, p1) in &mid {
        for &(m2, p2) in &mid {
            for &(m3, p3) in &mid {
                out.push(unpinned(vec![
                    demand("A", 0, m1, p1, 0),
                    demand("B", 2, m2, p2, 1),
                    demand("C", 1, m3, p3, 2),
                ]));
            }
        }
    }

    let few = pairs(&[1, 3, 6]);
    for &(m1, p1) in &few {
        for &(m2, p2) in &few {
            for &(m3, p3) in &few {
                for &(m4, p4) in &few {
                    out.push(unpinned(vec![
                        demand("A", 0, m1, p1, 0),
                        demand("B", 1, m2, p2, 1),
                        demand("C", 1, m3, p3, 2),
                        demand("D", 2, m4, p4, 3),
                    ]));
                }
            }
        }
    }

    // One pinned control block at start s, width = its min.
    for start_units in [0u32, 2, 4, 7, 9] {
        for (m0, p0) in [(1u32, 1u32), (2, 4), (3, 3)] {
            if start_units + m0 > 12 {
                continue;
            }
            for &(m1, p1) in &mid {
                for &(m2, p2) in &mid {
                    let demands = vec![
                        demand("A", 0, m0, p0, 0),
                        demand("B", 1, m1, p1, 1),
                        demand("C", 2, m2, p2, 2),
                    ];
                    out.push(pinned_instance(demands, &[("A", start_units, m0)]));
                }
            }
        }
    }

    // Two pinned control blocks plus two movable demands.
    for (s0, s1) in [(0u32, 6u32), (3, 9), (2, 10)] {
        for &(m2, p2) in &few {
            for &(m3, p3) in &few {
                let demands = vec![
                    demand("A", 0, 1, 2, 0),
                    demand("B", 0, 1, 1, 1),
                    demand("C", 1, m2, p2, 2),
                    demand("D", 2, m3, p3, 3),
                ];
                out.push(pinned_instance(demands, &[("A", s0, 1), ("B", s1, 1)]));
            }
        }
    }
    out
}

fn pinned_instance(demands: Vec<DemandProfile>, pins: &[(&str, u32, u32)]) -> Instance {
    let pinned = pins
        .iter()
        .map(|&(sn, start_units, width_units)| SpectrumAllocation {
            sn_id: sn.into(),
            start_mhz: start_units * GRID,
            width_mhz: width_units * GRID,
            priority: QosPriority::CONTROL,
            pinned: true,
            epoch: 1,
        })
        .collect();
    Instance {
        input: AllocatorInput::new(small_band(), GUARD, demands).with_pinned(pinned).with_prev_epoch(1),
        pinned: true,
    }
}

/// The shrunk-band analog of the post-AGV walkthrough: control pinned at
/// the bottom, sensing and nomadic sharing the rest.
pub fn walkthrough_analog() -> AllocatorInput {
    let before = compute_plan(&AllocatorInput::new(
        small_band(),
        GUARD,
        vec![demand("SN-1", 0, 2, 2, 0), demand("SN-2", 2, 4, 8, 0)],
    ))
    .unwrap();
    AllocatorInput::new(
        small_band(),
        GUARD,
        vec![demand("SN-1", 0, 2, 2, 0), demand("SN-2", 2, 4, 8, 0), demand("SN-3", 1, 3, 6, 10)],
    )
    .with_pinned(vec![before.get("SN-1").unwrap().clone()])
    .with_prev_epoch(before.epoch)
}
