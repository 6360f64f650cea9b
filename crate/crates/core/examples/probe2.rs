use uav_rsma::geometry::Point3;
use uav_rsma::rsma::{Association, NetworkState, PowerAllocation};
use uav_rsma::scenario::load_scenario;
use uav_rsma::solver::*;
use uav_rsma::surrogate::*;

fn main() {
    let scenario = load_scenario("/tmp/s1.json").unwrap();
    let setup = scenario.setup().unwrap();
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string("/tmp/run-s1/result.json").unwrap()).unwrap();
    let positions: Vec<Point3> = r["positions"]
        .as_array().unwrap().iter()
        .map(|p| Point3::new(p["x"].as_f64().unwrap(), p["y"].as_f64().unwrap(), p["z"].as_f64().unwrap()))
        .collect();
    let common: Vec<f64> = r["power"]["common"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let private: Vec<Vec<f64>> = r["power"]["private"].as_array().unwrap().iter()
        .map(|row| row.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect()).collect();
    let assoc: Vec<Vec<f64>> = r["association"].as_array().unwrap().iter()
        .map(|row| row.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect()).collect();
    let state = NetworkState {
        positions,
        power: PowerAllocation { common, private },
        assoc: Association { values: assoc, capacities: scenario.capacities.clone() },
    };
    let gains = gain_table(&setup, &state.positions, false).unwrap();
    let lambda = vec![vec![0.05; 3]; 12];
    let exp = build_expansion(&state, &setup.users, &gains, &setup.params, &lambda, true).unwrap();
    let sur = power_assoc_surrogate(&exp);
    let config = scenario.solver.clone();
    let (p2, c2, info) = solve_power_assoc(&exp, &sur, &setup, &config, Scheme::Rsma, 99).unwrap();
    println!("achieved surrogate objective: {}", info.surrogate_objective);
    println!("fresh-solve common: {:?}", p2.common);
    for m in 0..3 {
        let tot: f64 = (0..12).map(|k| p2.private[k][m]).sum();
        println!("fresh-solve uav {m} private total: {tot:.4}");
    }
    // manual recomputation for user 2
    {
        let k = 2usize;
        let s2 = setup.params.noise_power;
        let srv = (0..3).position(|m| state.assoc.values[k][m] >= 0.999).unwrap();
        println!("user {k} server {srv}");
        let served: Vec<usize> = (0..12).filter(|&j| state.assoc.values[j][srv] >= 0.999).collect();
        println!("served set of uav {srv}: {served:?}");
        let w: Vec<f64> = (0..3).map(|m| {
            let mut p = state.power.common[m];
            for j in 0..12 { if state.assoc.values[j][m] >= 0.999 { p += state.power.private[j][m]; } }
            p / s2
        }).collect();
        println!("w_total: {w:?}");
        let g = &gains.gains;
        let p_total: f64 = (0..3).map(|m| w[m] * g[k][m]).collect::<Vec<_>>().iter().sum();
        println!("p_total(user2) = {p_total:.3}, own-uav term = {:.3}", w[srv]*g[k][srv]);
        println!("exp.gains row 2: {:?}", exp.gains[k]);
        println!("table gains row 2: {:?}", g[k]);
        println!("exp.server: {:?}", exp.server);
        println!("exp.weakest: {:?}", exp.weakest);
        println!("exp.states row2: {:?}", exp.states[k]);
    }
    let frozen_stored = exp.frozen_rates_with_power(&state.power);
    println!("frozen at STORED final powers: {:?}", frozen_stored.iter().map(|x| (x*1e4).round()/1e4).collect::<Vec<_>>());
    let rates_true = uav_rsma::rsma::compute_rates(&state, &gains).unwrap();
    println!("true rates at stored state: {:?}", rates_true.per_user_total.iter().map(|x| (x*1e4).round()/1e4).collect::<Vec<_>>());
    let assoc2 = Association { values: c2, capacities: scenario.capacities.clone() };
    let frozen = exp.frozen_rates_with_power(&p2);
    for k in 0..12 {
        let believed = sur.per_user[k].value(&p2, &assoc2);
        println!("user {k:>2}: believed {believed:.4}  frozen-at-solution {:.4}", frozen[k]);
    }
}
