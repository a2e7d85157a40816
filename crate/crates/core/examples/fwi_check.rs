use std::time::Instant;

use tuct_core::config::RunConfig;
use tuct_core::inversion::{fwi_reconstruct, shift_interior};
use tuct_core::phantom::{extract_skull, generate_phantom};
use tuct_core::seeds;
use tuct_core::uq::normalized_quality;
use tuct_core::wavesim::simulate_forward;

fn main() {
    let cfg = RunConfig::default();
    let spec = cfg.grid_spec();
    let geom = cfg.geometry().unwrap();
    let wavelet = cfg.wavelet().unwrap();
    let table = cfg.tissue_table();
    let phantom = generate_phantom(
        &spec,
        &table,
        seeds::derive(cfg.run.master_seed, "acc-physics", 0),
    )
    .unwrap();
    let x0 = extract_skull(&phantom, table.water).unwrap();
    let records: Vec<_> = geom
        .active_sources
        .iter()
        .map(|&src| simulate_forward(&phantom.model, &geom, &wavelet, src).unwrap())
        .collect();

    let q0 = normalized_quality(&x0.velocity, &phantom.model.velocity).unwrap();
    eprintln!("x0 baseline: ssim {:.4} rmse {:.5}", q0.ssim, q0.rmse);

    let t = Instant::now();
    let fwi_cfg = cfg.fwi_config();
    let result = fwi_reconstruct(&x0, &geom, &wavelet, &records, &fwi_cfg).unwrap();
    let q = normalized_quality(&result.model.velocity, &phantom.model.velocity).unwrap();
    eprintln!(
        "fwi: {:?} after {} rows, {} gradient calls, {:.1}s",
        result.status,
        result.misfit_history.len(),
        result.gradient_calls,
        t.elapsed().as_secs_f64()
    );
    let first = result.misfit_history.first().unwrap().misfit;
    let last = result.misfit_history.last().unwrap().misfit;
    eprintln!("misfit {first:.3e} -> {last:.3e}");
    eprintln!("recon: ssim {:.4} rmse {:.5}", q.ssim, q.rmse);

    for delta in [150.0, 300.0] {
        let x0s = shift_interior(&x0, &phantom.interior_mask, delta).unwrap();
        let t2 = Instant::now();
        let shifted = fwi_reconstruct(&x0s, &geom, &wavelet, &records, &fwi_cfg).unwrap();
        let lshift = shifted.misfit_history.last().unwrap().misfit;
        let qs = normalized_quality(&shifted.model.velocity, &phantom.model.velocity).unwrap();
        eprintln!(
            "shift {delta}: {:?} misfit {:.3e} ssim {:.4} degrades: {} ({:.1}s)",
            shifted.status,
            lshift,
            qs.ssim,
            lshift > last,
            t2.elapsed().as_secs_f64()
        );
    }
}
