//! vCLUB on correlated 1-D Gaussians: the converged estimate next to the
//! true mutual information and the estimator's own limit rho^2 / (1 - rho^2).

use srl::objectives::{converged_gaussian_vclub, gaussian_mi, gaussian_vclub_limit};

fn main() {
    println!("{:>5} {:>10} {:>10} {:>10}", "rho", "true MI", "limit", "estimate");
    for rho in [0.0, 0.3, 0.5, 0.7, 0.9] {
        let est = converged_gaussian_vclub(rho, 11);
        println!("{rho:>5.2} {:>10.4} {:>10.4} {est:>10.4}", gaussian_mi(rho), gaussian_vclub_limit(rho));
    }
}
