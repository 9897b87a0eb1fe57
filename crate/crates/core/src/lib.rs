//! Multi-agent implicit mapping with uncertainty-weighted decentralized
//! consensus ADMM, simulated over lossy links on a 2D signed-distance task.

#[cfg(test)]
macro_rules! assert_close {
    ($a:expr, $b:expr, $tol:expr) => {{
        let (a, b): (f64, f64) = ($a, $b);
        assert!((a - b).abs() <= $tol, "{} vs {} (tol {})", a, b, $tol);
    }};
}

pub mod consensus;
pub mod engine;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod network_sim;
pub mod neural_map;
pub mod objective;
pub mod par;
pub mod rng;
pub mod scene2d;
pub mod uncertainty;
