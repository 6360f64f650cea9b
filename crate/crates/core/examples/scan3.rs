use rayon::prelude::*;
use uav_rsma::harness::run_scenario;
use uav_rsma::scenario::{generate_scenario, GenSpec};
use uav_rsma::solver::Scheme;

fn main() {
    let seeds: Vec<u64> = (1..=40).collect();
    let rows: Vec<String> = seeds
        .par_iter()
        .map(|&seed| {
            let s = match generate_scenario(&GenSpec::default(), seed) {
                Ok(s) => s,
                Err(e) => return format!("seed {seed:>3}: genfail {e}"),
            };
            let run = |scheme| run_scenario(&s, scheme).map(|r| (r.trace[0].min_rate_true, r.true_rates.min_rate));
            let (i_r, rsma) = run(Scheme::Rsma).unwrap();
            let (_, noma) = run(Scheme::Noma).unwrap();
            let (_, fpos) = run(Scheme::FixedPosition).unwrap();
            let (_, fpow) = run(Scheme::FixedPower).unwrap();
            let (_, ngeo) = run(Scheme::NoGeometry).unwrap();
            let ratio = rsma / i_r;
            let beats_noma = rsma >= noma;
            let beats = [fpos, fpow, ngeo].iter().filter(|&&b| rsma >= b).count();
            format!(
                "seed {seed:>3}: init {i_r:.4} rsma {rsma:.4} ratio {ratio:5.2} | noma {noma:.4} fpos {fpos:.4} fpow {fpow:.4} ngeo {ngeo:.4} | >=noma {} baselines {}/3",
                beats_noma as u8, beats
            )
        })
        .collect();
    for row in rows {
        println!("{row}");
    }
}
