use hexcore::datasets::{ShiftKind, ShiftRecipe, SplitFractions};
use hexcore::harness::{run_grid, ExperimentConfig, MethodCode};
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let recipe = |rho: f64| ShiftRecipe {
        kind: ShiftKind::BackgroundCorrelated { classes: 7, backgrounds: 7, rho },
        side: 28, total: 3500, split: SplitFractions::default_shift(),
    };
    let mut configs = Vec::new();
    for (m, rho) in [(MethodCode::B, 0.9), (MethodCode::H, 0.9), (MethodCode::H, 0.0)] {
        for seed in 0..3u64 {
            let mut cfg = ExperimentConfig::new(recipe(rho), m, seed);
            cfg.epochs = 60;
            cfg.learning_rate = 2e-3;
            cfg.batch_size = 192;
            cfg.arch.g_width = 7;
            configs.push(cfg);
        }
    }
    let results = run_grid(&configs).unwrap();
    for chunk in results.chunks(5) {
        let mean = chunk.iter().map(|r| r.test_accuracy).sum::<f64>() / 5.0;
        let per: Vec<String> = chunk.iter().map(|r| format!("{:.3}", r.test_accuracy)).collect();
        println!("{:?} {}: mean {:.3}  [{}]", chunk[0].method, chunk[0].shift_desc, mean, per.join(" "));
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
