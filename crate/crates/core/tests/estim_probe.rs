//! Scratch probe (removed before final): estimator convergence vs quadrature.
mod common;

use ldm_lab::estim::{js_mi_estimate, Discriminator};

#[test]
#[ignore]
fn probe_gaussian_convergence() {
    for &rho in &[0.0, 0.5, 0.9] {
        let target = 2.0 * common::jsd_gaussian_vs_product(rho);
        let batch = common::correlated_gaussian_batch(4096, rho, 1234);
        for &updates in &[1000usize, 2000, 3000] {
            let mut disc = Discriminator::new(2, 777);
            let est = js_mi_estimate(&batch, &mut disc, updates, 42).unwrap();
            println!("rho={rho} updates={updates}: est={est:.4} target={target:.4} diff={:+.4}", est - target);
        }
    }
}
