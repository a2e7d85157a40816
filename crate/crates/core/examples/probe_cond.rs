use std::fs::File;
use std::io::BufReader;

use tuct_core::config::RunConfig;
use tuct_core::flow;
use tuct_core::phantom::{build_dataset, Split};
use tuct_core::seeds;

fn quantiles(label: &str, values: &mut Vec<f64>) {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let q = |p: f64| values[((n - 1) as f64 * p) as usize];
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
    eprintln!(
        "{label}: min {:.3e} q01 {:.3e} q25 {:.3e} q50 {:.3e} q75 {:.3e} q99 {:.3e} max {:.3e} mean {:.3e} std {:.3e}",
        q(0.0), q(0.01), q(0.25), q(0.5), q(0.75), q(0.99), q(1.0), mean, std
    );
}

fn main() {
    let cfg = RunConfig::default();
    let mut r = BufReader::new(File::open("/tmp/tune.nfc").unwrap());
    let params = flow::read_checkpoint(&mut r).unwrap();
    eprintln!(
        "stats: field mean {:.4} std {:.4} | cond mean {:.4e} std {:.4e}",
        params.field_mean, params.field_std, params.cond_mean, params.cond_std
    );

    let spec = cfg.grid_spec();
    let geom = cfg.geometry().unwrap();
    let wavelet = cfg.wavelet().unwrap();
    let table = cfg.tissue_table();
    let ds = build_dataset(
        4,
        &spec,
        &geom,
        &wavelet,
        &table,
        cfg.dataset.noise_level,
        &cfg.dataset.source_counts,
        seeds::derive(cfg.run.master_seed, "dataset", 0),
    )
    .unwrap();
    for p in ds.split(Split::Train) {
        let mut raw: Vec<f64> = p.summary.values.iter().copied().collect();
        quantiles("raw summary", &mut raw);
        let mut norm: Vec<f64> = params
            .normalize_condition(&p.summary.values)
            .iter()
            .copied()
            .collect();
        quantiles("normalized ", &mut norm);
    }
}
