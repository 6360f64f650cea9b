use uav_rsma::harness::{compare_baselines_on, COMPARE_SCHEMES};
use uav_rsma::scenario::{generate_scenario, GenSpec};
use uav_rsma::solver::Scheme;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds: Vec<u64> = args
        .get(1)
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![1, 2, 3, 4, 5]);
    let base = generate_scenario(&GenSpec::default(), 18).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let report = compare_baselines_on(&base, &seeds, dir.path()).unwrap();
    println!("{:<16} {}", "scheme", seeds.iter().map(|s| format!("seed{s:<8}")).collect::<Vec<_>>().join(" "));
    for scheme in COMPARE_SCHEMES {
        let row: Vec<String> = seeds
            .iter()
            .map(|&s| match report.min_rate(scheme, s) {
                Some(r) => format!("{r:<12.4}"),
                None => "failed      ".into(),
            })
            .collect();
        println!("{:<16} {}", scheme.name(), row.join(" "));
    }
    // ordering verdicts
    let get = |sch: Scheme, s: u64| report.min_rate(sch, s).unwrap_or(f64::NAN);
    let mut noma_ok = 0;
    let mut base_ok = [0usize; 3];
    for &s in &seeds {
        let r = get(Scheme::Rsma, s);
        if r >= get(Scheme::Noma, s) { noma_ok += 1; }
        for (i, b) in [Scheme::FixedPosition, Scheme::FixedPower, Scheme::NoGeometry].iter().enumerate() {
            if r >= get(*b, s) { base_ok[i] += 1; }
        }
    }
    println!("rsma >= noma on {noma_ok}/{} seeds", seeds.len());
    println!("rsma >= fixed-position on {}/{} | fixed-power {}/{} | no-geometry {}/{}",
        base_ok[0], seeds.len(), base_ok[1], seeds.len(), base_ok[2], seeds.len());
}
