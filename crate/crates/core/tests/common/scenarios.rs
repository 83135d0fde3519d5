//! Random but valid simulation scenarios.

use nin_dsm_core::kira::Topology;
use nin_dsm_core::scenario::Scenario;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

fn demand(rng: &mut ChaCha8Rng, sn: &str, priority: u8, grid: u32) -> Value {
    let min = grid * rng.gen_range(1..=40 / grid);
    let pref = (min + grid * rng.gen_range(0..=40 / grid)).min(100);
    json!({"sn_id": sn, "priority": priority, "min_bw_mhz": min, "pref_bw_mhz": pref})
}

pub fn random_scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (grid, guard) = if rng.gen_bool(0.25) { (5, 5 * rng.gen_range(0..=1)) } else { (1, rng.gen_range(0..=3)) };
    let n = rng.gen_range(4..=15);
    let topo = Topology::random_connected(n, rng.gen_range(1.5..4.0), &mut rng);
    let mut nodes: Vec<String> = topo.nodes().map(str::to_string).collect();
    let links: Vec<(String, String)> = topo.links().map(|(a, b)| (a.to_string(), b.to_string())).collect();
    let dock = nodes.choose(&mut rng).unwrap().clone();
    nodes.push("agv".into());

    let mut homes: Vec<String> = topo.nodes().map(str::to_string).collect();
    homes.shuffle(&mut rng);
    let sm_node = homes[0].clone();

    let mut agents = Vec::new();
    let mut events = Vec::new();
    let end = rng.gen_range(20_000..60_000u64);
    let controls = rng.gen_range(0..=2usize).min(homes.len() - 1);
    let sensing = rng.gen_range(0..=2usize).min(homes.len() - 1 - controls);
    let mut k = 0;
    for i in 0..controls + sensing {
        k += 1;
        let sn = format!("SN-{k}");
        let (archetype, priority) = if i < controls { ("CONTROL", 0) } else { ("SENSING", 2) };
        agents.push(json!({
            "sn_id": sn, "archetype": archetype,
            "demand": demand(&mut rng, &sn, priority, grid),
            "home_node": homes[i + 1],
        }));
        events.push(json!({"at_ms": rng.gen_range(0..5_000u64), "action": "REGISTER_SN", "args": {"sn_id": sn}}));
        if priority == 2 {
            for _ in 0..rng.gen_range(0..3) {
                let on = rng.gen_bool(0.5);
                events.push(json!({"at_ms": rng.gen_range(0..end), "action": "TOGGLE_SN2", "args": {"sn_id": sn, "on": on}}));
            }
        }
    }
    let has_agv = rng.gen_bool(0.6);
    if has_agv {
        k += 1;
        let sn = format!("SN-{k}");
        let hops = rng.gen_range(1..=3);
        let pool: Vec<String> = topo.nodes().map(str::to_string).collect();
        let waypoints: Vec<String> = (0..hops).map(|_| pool.choose(&mut rng).unwrap().clone()).collect();
        agents.push(json!({
            "sn_id": sn, "archetype": "NOMADIC",
            "demand": demand(&mut rng, &sn, 1, grid),
            "home_node": "agv",
            "agv": {"waypoints": waypoints, "dwell_ms": rng.gen_range(0..6_000u64), "hop_interval_ms": rng.gen_range(200..1_500u64)},
        }));
        for _ in 0..rng.gen_range(0..3) {
            events.push(json!({"at_ms": rng.gen_range(0..end), "action": "CALL_AGV", "args": {"sn_id": sn}}));
        }
        if rng.gen_bool(0.3) {
            events.push(json!({"at_ms": rng.gen_range(0..end), "action": "REGISTER_SN", "args": {"sn_id": sn}}));
        }
    }
    for _ in 0..rng.gen_range(0..4) {
        let anchor = topo.nodes().collect::<Vec<_>>().choose(&mut rng).unwrap().to_string();
        events.push(json!({"at_ms": rng.gen_range(0..end), "action": "MOVE_NODE", "args": {"node": "agv", "anchor": anchor}}));
    }
    events.push(json!({"at_ms": end, "action": "END"}));

    let scenario = json!({
        "seed": seed,
        "band": {"lo_mhz": 3700, "hi_mhz": 3800, "grid_mhz": grid},
        "guard_mhz": guard,
        "sm_node": sm_node,
        "topology": {"nodes": nodes, "links": links, "attachments": {"agv": dock}},
        "agents": agents,
        "events": events,
        "delays": {"per_hop_ms": rng.gen_range(0.0..2.0), "round_ms": rng.gen_range(1..20u64)},
    });
    Scenario::from_json_str(&scenario.to_string()).unwrap_or_else(|e| panic!("seed {seed}: {e}\n{scenario}"))
}
