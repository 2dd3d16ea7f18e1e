//! Central finite-difference checks for tape ops.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DenseTensor, NumericsError, Tape, Var};

/// Denominator floor for relative errors, so components whose true gradient is
/// ~0 are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Central difference of a scalar function at every coordinate of `x`.
pub fn central_difference<F>(f: F, x: &DenseTensor, h: f64) -> Result<DenseTensor, NumericsError>
where
    F: Fn(&DenseTensor) -> Result<f64, NumericsError>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(DenseTensor::from_parts_unchecked(x.shape().to_vec(), out))
}

type Build = Box<dyn Fn(&mut Tape, Var) -> Result<Var, NumericsError> + Send + Sync>;

/// A scalar function of one input tensor, written against the tape.
pub struct GradCheckCase {
    pub name: String,
    pub input: DenseTensor,
    pub build: Build,
}

impl GradCheckCase {
    pub fn new(
        name: impl Into<String>,
        input: DenseTensor,
        build: impl Fn(&mut Tape, Var) -> Result<Var, NumericsError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            input,
            build: Box::new(build),
        }
    }

    fn eval(&self, x: &DenseTensor) -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let root = (self.build)(&mut tape, v)?;
        tape.value(root)?.item()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub coords: usize,
}

/// Compares the tape gradient of `case` against central differences.
/// `corrupt` lets a caller tamper with the analytic gradient (negative controls).
pub fn run_case(
    case: &GradCheckCase,
    h: f64,
    corrupt: Option<&dyn Fn(&mut DenseTensor)>,
) -> Result<GradCheckReport, NumericsError> {
    let mut tape = Tape::new();
    let v = tape.param(case.input.clone());
    let root = (case.build)(&mut tape, v)?;
    let mut analytic = tape.backward(root)?.wrt(&tape, v)?;
    if let Some(c) = corrupt {
        c(&mut analytic);
    }
    let numeric = central_difference(|x| case.eval(x), &case.input, h)?;
    let max_rel_err = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        name: case.name.clone(),
        max_rel_err,
        coords: analytic.len(),
    })
}

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> DenseTensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    DenseTensor::from_parts_unchecked(shape, data)
}

/// One case per differentiable op, each reduced to a scalar through a fixed
/// random projection so every output coordinate matters.
pub fn op_suite(seed: u64) -> Vec<GradCheckCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k, m) = (4, 5, 3);
    let x = random(&mut rng, vec![n, k], 1.0);
    let w = random(&mut rng, vec![k, m], 1.0);
    let proj_nk = random(&mut rng, vec![n, k], 1.0);
    let proj_nm = random(&mut rng, vec![n, m], 1.0);
    let proj_n = random(&mut rng, vec![n], 1.0);
    let bias = random(&mut rng, vec![k], 1.0);
    let other = random(&mut rng, vec![n, k], 1.0);
    // keep l1 and relu inputs away from their kinks
    let away: Vec<f64> = x
        .data()
        .iter()
        .map(|v| if v.abs() < 0.05 { v + 0.1 } else { *v })
        .collect();
    let away = DenseTensor::from_parts_unchecked(vec![n, k], away);
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();

    fn project(t: &mut Tape, y: Var, p: &DenseTensor) -> Result<Var, NumericsError> {
        let c = t.constant(p.clone());
        let prod = t.mul(y, c)?;
        t.sum(prod)
    }

    vec![
        {
            let (w, p) = (w.clone(), proj_nm.clone());
            GradCheckCase::new("matmul_lhs", x.clone(), move |t, v| {
                let wv = t.constant(w.clone());
                let y = t.matmul(v, wv)?;
                project(t, y, &p)
            })
        },
        {
            let (x, p) = (x.clone(), proj_nm.clone());
            GradCheckCase::new("matmul_rhs", w.clone(), move |t, v| {
                let xv = t.constant(x.clone());
                let y = t.matmul(xv, v)?;
                project(t, y, &p)
            })
        },
        {
            let (x, p) = (x.clone(), proj_nk.clone());
            GradCheckCase::new("add_bias", bias.clone(), move |t, v| {
                let xv = t.constant(x.clone());
                let y = t.add_bias(xv, v)?;
                project(t, y, &p)
            })
        },
        {
            let (o, p) = (other.clone(), proj_nk.clone());
            GradCheckCase::new("add", x.clone(), move |t, v| {
                let ov = t.constant(o.clone());
                let y = t.add(v, ov)?;
                project(t, y, &p)
            })
        },
        {
            let p = proj_nk.clone();
            GradCheckCase::new("mul", x.clone(), move |t, v| {
                let y = t.mul(v, v)?;
                project(t, y, &p)
            })
        },
        {
            let p = proj_nk.clone();
            GradCheckCase::new("scale", x.clone(), move |t, v| {
                let y = t.scale(v, -1.7)?;
                project(t, y, &p)
            })
        },
        {
            let p = proj_nk.clone();
            GradCheckCase::new("relu", away.clone(), move |t, v| {
                let y = t.relu(v)?;
                project(t, y, &p)
            })
        },
        {
            let p = proj_nk.clone();
            GradCheckCase::new("mean", x.clone(), move |t, v| {
                let y = t.mul(v, v)?;
                let y = project(t, y, &p)?;
                t.mean(y)
            })
        },
        {
            let p = proj_n.clone();
            GradCheckCase::new("l1_rows", away.clone(), move |t, v| {
                let y = t.l1_rows(v)?;
                project(t, y, &p)
            })
        },
        {
            let p = proj_n.clone();
            GradCheckCase::new("logsumexp_rows", x.clone(), move |t, v| {
                let y = t.logsumexp_rows(v)?;
                project(t, y, &p)
            })
        },
        {
            let p = proj_n.clone();
            GradCheckCase::new("softmax_xent_rows", x.clone(), move |t, v| {
                let y = t.softmax_xent_rows(v, &labels)?;
                project(t, y, &p)
            })
        },
        {
            let p = proj_n;
            GradCheckCase::new("uniform_kl_rows", x, move |t, v| {
                let y = t.uniform_kl_rows(v)?;
                project(t, y, &p)
            })
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for case in op_suite(7) {
            let r = run_case(&case, 1e-5, None).unwrap();
            assert!(r.max_rel_err <= 1e-5, "{}: {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let case = &op_suite(7)[0];
        let corrupt = |g: &mut DenseTensor| g.data_mut()[0] += 0.01;
        let r = run_case(case, 1e-5, Some(&corrupt)).unwrap();
        assert!(r.max_rel_err > 1e-3);
    }
}
