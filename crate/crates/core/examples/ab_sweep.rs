use orchestra::policy_sim::{train, TrainConfig};

fn main() {
    let text = std::env::args().nth(1).map(|p| std::fs::read_to_string(p).unwrap()).unwrap_or_default();
    let seeds: Vec<u64> = (1..=12).chain([42]).collect();
    let results: Vec<_> = std::thread::scope(|s| {
        let hs: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let text = text.clone();
                s.spawn(move || {
                    let mut out = vec![];
                    for cf in [false, true] {
                        let mut cfg = TrainConfig::from_toml(&text).unwrap();
                        cfg.seed = seed;
                        cfg.parallel = false;
                        cfg.counterfactual.enabled = cf;
                        let run = train(&cfg).unwrap();
                        let r = run.report;
                        let pc = r.rows.windows(2).any(|w| w[0].p_dep != w[1].p_dep);
                        out.push((r.tail_mean(100, |x| x.mean_reward), r.tail_mean(100, |x| x.mean_tokens), r.cumulative_tokens(), pc, r.tail_mean(100, |x| x.success)));
                    }
                    (seed, out)
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut pass = 0;
    let (mut dr, mut dt) = (0.0, 0.0);
    for (seed, o) in &results {
        let (off, on) = (o[0], o[1]);
        let ok = [on.0 >= off.0, on.1 <= off.1, on.2 > off.2, on.3];
        let all = ok.iter().all(|x| *x);
        pass += all as usize;
        dr += on.0 - off.0;
        dt += on.1 - off.1;
        println!("{seed:>3} rew {:.4}/{:.4} tok {:.1}/{:.1} succ {:.3}/{:.3} cum {}/{} {:?}{}", off.0, on.0, off.1, on.1, off.4, on.4, off.2, on.2, ok, if all { "" } else { "  <-" });
    }
    let n = results.len() as f64;
    println!("pass {pass}/{} mean drew {:+.4} mean dtok {:+.2}", results.len(), dr / n, dt / n);
}
