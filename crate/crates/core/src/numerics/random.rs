use rand::Rng;

/// Draws `n` i.i.d. `N(0, std²)` values with the Box–Muller transform.
///
/// Each uniform pair yields two normals; an odd `n` discards the last one.
pub fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        // 1 - u lies in (0, 1], keeping the log finite
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        out.push(std * r * theta.cos());
        out.push(std * r * theta.sin());
    }
    out.truncate(n);
    out
}
