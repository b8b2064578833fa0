//! Trains a small two-agent model and measures how AP degrades with pose
//! noise and message latency.

use heatv2x::config::RunConfig;
use heatv2x::orchestration::train_base;
use heatv2x::v2x::{robustness_sweep, write_sweep_csv};

fn main() -> heatv2x::Result<()> {
    let mut rc = RunConfig::default();
    rc.train_scenes = 80;
    rc.eval_scenes = 20;
    rc.base_steps = 400;
    rc.validate()?;
    let roster = vec![rc.ego(); 2];
    let base = train_base(&rc)?.ckpt;
    let variances = [0.0, 0.2, 0.4, 0.8];
    let latencies = [0, 1, 3];
    let rows = robustness_sweep(&base.params, &rc, &roster, &variances, &latencies)?;
    println!("AP@0.5 by pose variance (rows) and latency in frames (columns)");
    println!("        {}", latencies.map(|l| format!("{l:>7}")).join(""));
    for (v, var) in variances.iter().enumerate() {
        let cells: Vec<String> = (0..latencies.len()).map(|l| format!("{:7.3}", rows[(v * latencies.len() + l) * 2].ap)).collect();
        println!("  {var:4.1}  {}", cells.join(""));
    }
    let path = std::env::temp_dir().join("heatv2x_sweep.csv");
    write_sweep_csv(&path, &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}
