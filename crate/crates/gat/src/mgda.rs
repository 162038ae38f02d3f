//! Multiple Gradient Descent Algorithm: the min-norm element of the convex
//! hull of per-task gradients via Frank-Wolfe on the simplex, the two-task
//! closed form, and the weighted shared-parameter update.

use crate::error::{GatError, Result};

/// Nonnegative task weights summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn uniform(t: usize) -> Self {
        WeightVector(vec![1.0 / t as f64; t])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn on_simplex(&self, tol: f64) -> bool {
        self.0.iter().all(|&a| a >= -tol)
            && (self.0.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

/// T x T matrix of pairwise gradient inner products.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub dim: usize,
    /// Row-major, symmetric.
    pub m: Vec<f64>,
}

impl GramMatrix {
    pub fn from_gradients(grads: &[Vec<f64>]) -> Result<Self> {
        let t = grads.len();
        if t == 0 {
            return Err(GatError::InvalidArgument("no gradients".into()));
        }
        let d = grads[0].len();
        if grads.iter().any(|g| g.len() != d) {
            return Err(GatError::ShapeMismatch("gradient lengths differ".into()));
        }
        let mut m = vec![0.0; t * t];
        for i in 0..t {
            for j in i..t {
                let dot: f64 = grads[i].iter().zip(&grads[j]).map(|(a, b)| a * b).sum();
                m[i * t + j] = dot;
                m[j * t + i] = dot;
            }
        }
        Ok(GramMatrix { dim: t, m })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[i * self.dim + j]
    }

    fn validate(&self) -> Result<()> {
        let t = self.dim;
        if self.m.len() != t * t {
            return Err(GatError::ShapeMismatch("gram matrix size".into()));
        }
        for i in 0..t {
            if self.get(i, i) < -1e-8 {
                return Err(GatError::InvalidArgument(format!(
                    "negative gram diagonal at {i}"
                )));
            }
            for j in (i + 1)..t {
                if (self.get(i, j) - self.get(j, i)).abs() > 1e-8 {
                    return Err(GatError::InvalidArgument("non-symmetric gram".into()));
                }
            }
        }
        Ok(())
    }

    /// alpha^T M alpha, i.e. the squared norm of the combined direction.
    pub fn quad(&self, alpha: &[f64]) -> f64 {
        let t = self.dim;
        let mut acc = 0.0;
        for i in 0..t {
            for j in 0..t {
                acc += alpha[i] * alpha[j] * self.get(i, j);
            }
        }
        acc
    }
}

/// Closed-form min-norm point on the segment between two gradients.
/// Returns the weight `gamma` on `g1` and the combined direction.
/// The degenerate `g1 == g2` case returns `gamma = 0.5`.
pub fn min_norm_two_task(g1: &[f64], g2: &[f64]) -> Result<(f64, Vec<f64>)> {
    if g1.len() != g2.len() {
        return Err(GatError::ShapeMismatch(format!(
            "min_norm_two_task: {} vs {}",
            g1.len(),
            g2.len()
        )));
    }
    let diff_sq: f64 = g1.iter().zip(g2).map(|(a, b)| (a - b) * (a - b)).sum();
    let gamma = if diff_sq <= 1e-18 {
        0.5
    } else {
        let num: f64 = g1.iter().zip(g2).map(|(a, b)| (b - a) * b).sum();
        (num / diff_sq).clamp(0.0, 1.0)
    };
    let d = g1
        .iter()
        .zip(g2)
        .map(|(a, b)| gamma * a + (1.0 - gamma) * b)
        .collect();
    Ok((gamma, d))
}

#[derive(Debug, Clone)]
pub struct FrankWolfeResult {
    pub weights: WeightVector,
    /// ||d||^2 of the combined direction at the returned weights.
    pub norm_sq: f64,
    pub iters: usize,
    /// ||d||^2 after each iteration; non-increasing.
    pub norm_sq_trace: Vec<f64>,
}

pub const MGDA_MAX_ITERS: usize = 250;
pub const MGDA_TOL: f64 = 1e-6;

/// Frank-Wolfe solver for `min_{alpha on simplex} alpha^T M alpha`.
///
/// Each iteration picks the vertex `t = argmin_r (M alpha)_r`, then moves by
/// the exact line-search minimizer on the segment toward that vertex. Stops
/// when the step size drops to `tol` or after `max_iters`. The sublinear FW
/// rate cannot reach a 1e-6 optimality certificate in a bounded iteration
/// budget, so the returned weights are polished by an active-set solve on
/// the support (Wolfe's min-norm-point step); the polish never increases
/// `||d||^2`.
pub fn mgda_frank_wolfe(
    gram: &GramMatrix,
    max_iters: usize,
    tol: f64,
) -> Result<FrankWolfeResult> {
    gram.validate()?;
    if max_iters < 1 {
        return Err(GatError::InvalidArgument("max_iters must be >= 1".into()));
    }
    if tol <= 0.0 {
        return Err(GatError::InvalidArgument("tol must be positive".into()));
    }
    let t = gram.dim;
    let mut alpha = vec![1.0 / t as f64; t];
    let mut trace = Vec::new();
    let mut iters = 0;
    for _ in 0..max_iters {
        iters += 1;
        // m_alpha[r] = (M alpha)_r = g_r . d
        let mut m_alpha = vec![0.0; t];
        for r in 0..t {
            for j in 0..t {
                m_alpha[r] += gram.get(r, j) * alpha[j];
            }
        }
        let t_hat = (0..t)
            .min_by(|&a, &b| m_alpha[a].partial_cmp(&m_alpha[b]).unwrap())
            .unwrap();
        let a_ma: f64 = (0..t).map(|i| alpha[i] * m_alpha[i]).sum(); // alpha^T M alpha
        let e_ma = m_alpha[t_hat]; // e^T M alpha
        let e_me = gram.get(t_hat, t_hat);
        // f(gamma) = (1-g)^2 aMa + 2 g(1-g) eMa + g^2 eMe; exact minimizer:
        let denom = a_ma - 2.0 * e_ma + e_me;
        let gamma = if denom.abs() < 1e-18 {
            0.0
        } else {
            ((a_ma - e_ma) / denom).clamp(0.0, 1.0)
        };
        for (i, a) in alpha.iter_mut().enumerate() {
            *a *= 1.0 - gamma;
            if i == t_hat {
                *a += gamma;
            }
        }
        trace.push(gram.quad(&alpha));
        if gamma <= tol {
            break;
        }
    }
    // Renormalize away accumulated float drift.
    let s: f64 = alpha.iter().sum();
    if s > 0.0 {
        for a in alpha.iter_mut() {
            *a /= s;
        }
    }
    if let Some(polished) = active_set_polish(gram, &alpha, tol) {
        if gram.quad(&polished) <= gram.quad(&alpha) + 1e-12 {
            alpha = polished;
            trace.push(gram.quad(&alpha));
        }
    }
    let norm_sq = gram.quad(&alpha);
    Ok(FrankWolfeResult {
        weights: WeightVector(alpha),
        norm_sq,
        iters,
        norm_sq_trace: trace,
    })
}

/// Exact minimizer of `alpha^T M alpha` over the simplex restricted to a
/// candidate support, grown by certificate-violating vertices and shrunk by
/// negative coordinates (Wolfe's min-norm-point iteration). Returns `None`
/// when the bordered system is singular.
fn active_set_polish(gram: &GramMatrix, alpha0: &[f64], tol: f64) -> Option<Vec<f64>> {
    let t = gram.dim;
    let mut support: Vec<usize> = (0..t).filter(|&i| alpha0[i] > 1e-10).collect();
    if support.is_empty() {
        support.push(0);
    }
    for _ in 0..3 * t + 3 {
        let alpha_s = solve_face(gram, &support)?;
        if let Some(pos) = alpha_s
            .iter()
            .enumerate()
            .filter(|(_, &a)| a < -1e-12)
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
        {
            support.remove(pos);
            if support.is_empty() {
                return None;
            }
            continue;
        }
        let mut alpha = vec![0.0; t];
        for (k, &i) in support.iter().enumerate() {
            alpha[i] = alpha_s[k].max(0.0);
        }
        let s: f64 = alpha.iter().sum();
        if s <= 0.0 {
            return None;
        }
        for a in alpha.iter_mut() {
            *a /= s;
        }
        let quad = gram.quad(&alpha);
        let mut m_alpha = vec![0.0; t];
        for r in 0..t {
            for j in 0..t {
                m_alpha[r] += gram.get(r, j) * alpha[j];
            }
        }
        let r_min = (0..t)
            .min_by(|&a, &b| m_alpha[a].partial_cmp(&m_alpha[b]).unwrap())
            .unwrap();
        if m_alpha[r_min] >= quad - tol * quad.max(1e-12) || support.contains(&r_min) {
            return Some(alpha);
        }
        support.push(r_min);
        support.sort_unstable();
    }
    None
}

/// Solves `M_S a = lambda 1, sum a = 1` on the support via the bordered
/// system, with Gaussian elimination and partial pivoting.
fn solve_face(gram: &GramMatrix, support: &[usize]) -> Option<Vec<f64>> {
    let s = support.len();
    let n = s + 1;
    let mut a = vec![0.0; n * n];
    let mut b = vec![0.0; n];
    // Tiny relative ridge keeps rank-deficient grams (more tasks than
    // gradient dimensions) solvable without moving the optimum measurably.
    let ridge = 1e-12
        * support
            .iter()
            .map(|&i| gram.get(i, i))
            .fold(0.0f64, f64::max);
    for (r, &i) in support.iter().enumerate() {
        for (c, &j) in support.iter().enumerate() {
            a[r * n + c] = gram.get(i, j);
        }
        a[r * n + r] += ridge;
        a[r * n + s] = -1.0; // -lambda column
        a[s * n + r] = 1.0;
    }
    b[s] = 1.0;
    // Gaussian elimination with partial pivoting.
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| a[x * n + col].abs().partial_cmp(&a[y * n + col].abs()).unwrap())?;
        if a[piv * n + col].abs() < 1e-14 {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            b.swap(col, piv);
        }
        for row in (col + 1)..n {
            let f = a[row * n + col] / a[col * n + col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in (row + 1)..n {
            acc -= a[row * n + k] * x[k];
        }
        x[row] = acc / a[row * n + row];
    }
    Some(x[..s].to_vec())
}

/// `theta' = theta - eta * sum_t alpha_t g_t`.
pub fn aggregate_weighted_update(
    theta: &[f64],
    grads: &[Vec<f64>],
    alpha: &[f64],
    eta: f64,
) -> Result<Vec<f64>> {
    if grads.len() != alpha.len() {
        return Err(GatError::ShapeMismatch(format!(
            "{} gradients vs {} weights",
            grads.len(),
            alpha.len()
        )));
    }
    if grads.iter().any(|g| g.len() != theta.len()) {
        return Err(GatError::ShapeMismatch("gradient/parameter length".into()));
    }
    let mut out = theta.to_vec();
    for (g, &a) in grads.iter().zip(alpha) {
        for (o, &gv) in out.iter_mut().zip(g) {
            *o -= eta * a * gv;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_task_orthogonal_symmetry() {
        let (gamma, d) = min_norm_two_task(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((gamma - 0.5).abs() < 1e-12);
        assert_eq!(d, vec![0.5, 0.5]);
    }

    #[test]
    fn two_task_opposed_interior_solution() {
        let (gamma, d) = min_norm_two_task(&[2.0, 0.0], &[-1.0, 0.0]).unwrap();
        assert!((gamma - 1.0 / 3.0).abs() < 1e-12);
        assert!(d[0].abs() < 1e-12 && d[1].abs() < 1e-12);
    }

    #[test]
    fn two_task_degenerate_tie_break() {
        let (gamma, d) = min_norm_two_task(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(gamma, 0.5);
        assert_eq!(d, vec![1.0, 1.0]);
    }

    #[test]
    fn two_task_length_mismatch() {
        assert!(min_norm_two_task(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn frank_wolfe_identity_gram_is_uniform() {
        let gram = GramMatrix {
            dim: 3,
            m: vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        };
        let res = mgda_frank_wolfe(&gram, MGDA_MAX_ITERS, MGDA_TOL).unwrap();
        for a in &res.weights.0 {
            assert!((a - 1.0 / 3.0).abs() < 1e-4, "{:?}", res.weights);
        }
        assert!((res.norm_sq - 1.0 / 3.0).abs() < 1e-4);
        // Enumeration oracle on a simplex grid.
        let mut best = f64::INFINITY;
        let n = 100;
        for i in 0..=n {
            for j in 0..=(n - i) {
                let a = [
                    i as f64 / n as f64,
                    j as f64 / n as f64,
                    (n - i - j) as f64 / n as f64,
                ];
                best = best.min(gram.quad(&a));
            }
        }
        assert!(res.norm_sq <= best + 1e-4);
    }

    #[test]
    fn frank_wolfe_matches_two_task_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let g1: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g2: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (gamma, _) = min_norm_two_task(&g1, &g2).unwrap();
            let gram = GramMatrix::from_gradients(&[g1, g2]).unwrap();
            let res = mgda_frank_wolfe(&gram, MGDA_MAX_ITERS, MGDA_TOL).unwrap();
            assert!(
                (res.weights.0[0] - gamma).abs() < 1e-6,
                "fw {:?} vs closed form {gamma}",
                res.weights
            );
        }
    }

    #[test]
    fn frank_wolfe_zero_gradient_concentrates() {
        let grads = vec![vec![1.0, 2.0], vec![0.0, 0.0]];
        let gram = GramMatrix::from_gradients(&grads).unwrap();
        let res = mgda_frank_wolfe(&gram, MGDA_MAX_ITERS, MGDA_TOL).unwrap();
        assert!(res.norm_sq < 1e-10, "Pareto-stationary: ||d|| = 0");
        assert!(res.weights.0[1] > 0.99);
    }

    #[test]
    fn frank_wolfe_rejects_bad_gram() {
        let gram = GramMatrix { dim: 2, m: vec![1.0, 0.5, -0.5, 1.0] };
        assert!(mgda_frank_wolfe(&gram, 10, 1e-6).is_err());
        let gram = GramMatrix { dim: 2, m: vec![-1.0, 0.0, 0.0, 1.0] };
        assert!(mgda_frank_wolfe(&gram, 10, 1e-6).is_err());
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, GramMatrix) {
        let t = rng.gen_range(2..=6);
        let d = rng.gen_range(3..=10);
        let grads: Vec<Vec<f64>> = (0..t)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let gram = GramMatrix::from_gradients(&grads).unwrap();
        (grads, gram)
    }

    #[test]
    fn frank_wolfe_invariants_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..300 {
            let (grads, gram) = random_instance(&mut rng);
            let res = mgda_frank_wolfe(&gram, MGDA_MAX_ITERS, MGDA_TOL).unwrap();
            assert!(res.weights.on_simplex(1e-9));
            // min-norm dominance: no longer than any vertex
            let min_vertex = (0..gram.dim)
                .map(|i| gram.get(i, i))
                .fold(f64::INFINITY, f64::min);
            assert!(res.norm_sq <= min_vertex + 1e-8);
            // monotone trace
            for w in res.norm_sq_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9);
            }
            // optimality certificate
            let d: Vec<f64> = (0..grads[0].len())
                .map(|k| {
                    (0..gram.dim)
                        .map(|i| res.weights.0[i] * grads[i][k])
                        .sum()
                })
                .collect();
            let min_gd = (0..gram.dim)
                .map(|i| grads[i].iter().zip(&d).map(|(a, b)| a * b).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            assert!(
                min_gd >= res.norm_sq - MGDA_TOL * res.norm_sq - 1e-8,
                "certificate: min g.d = {min_gd}, ||d||^2 = {}",
                res.norm_sq
            );
            // common descent on the support
            if res.norm_sq > 1e-8 {
                for i in 0..gram.dim {
                    if res.weights.0[i] > 1e-6 {
                        let gd: f64 = grads[i].iter().zip(&d).map(|(a, b)| a * b).sum();
                        assert!(gd > 0.0, "supported task {i} must descend");
                    }
                }
            }
        }
    }

    #[test]
    fn weighted_update_arithmetic() {
        let theta = vec![1.0, 1.0];
        let out = aggregate_weighted_update(
            &theta,
            &[vec![1.0, 2.0], vec![9.0, 9.0]],
            &[1.0, 0.0],
            0.1,
        )
        .unwrap();
        assert!((out[0] - 0.9).abs() < 1e-12 && (out[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn weighted_update_uniform_identical_grads() {
        let theta = vec![0.0, 0.0];
        let g = vec![1.0, -1.0];
        let a = aggregate_weighted_update(&theta, &[g.clone(), g.clone()], &[0.5, 0.5], 0.2)
            .unwrap();
        let b = aggregate_weighted_update(&theta, &[g], &[1.0], 0.2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn weighted_update_zero_eta() {
        let theta = vec![3.0, -2.0];
        let out =
            aggregate_weighted_update(&theta, &[vec![5.0, 5.0]], &[1.0], 0.0).unwrap();
        assert_eq!(out, theta);
    }

    proptest! {
        #[test]
        fn simplex_invariant(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, gram) = random_instance(&mut rng);
            let res = mgda_frank_wolfe(&gram, MGDA_MAX_ITERS, MGDA_TOL).unwrap();
            prop_assert!(res.weights.on_simplex(1e-9));
        }
    }
}
