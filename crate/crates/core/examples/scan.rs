use uav_rsma::harness::run_scenario;
use uav_rsma::scenario::{generate_scenario, GenSpec};
use uav_rsma::solver::Scheme;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lo: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let hi: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(30);
    let spec = GenSpec::default();
    for seed in lo..=hi {
        let Ok(s) = generate_scenario(&spec, seed) else { println!("{seed}: genfail"); continue };
        match run_scenario(&s, Scheme::Rsma) {
            Ok(r) => {
                let init = r.trace[0].min_rate_true;
                let fin = r.true_rates.min_rate;
                println!(
                    "seed {seed:>3}: init {init:.4} -> final {fin:.4}  ratio {:.2}  losviol0 {}",
                    fin / init,
                    r.trace[0].los_violations
                );
            }
            Err(e) => println!("seed {seed}: ERROR {e}"),
        }
    }
}
