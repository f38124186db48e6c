//! Tensor-train parameterized distribution over binary masks.
//!
//! The unnormalized probability of a mask is the square of the chain product
//! of the selected core slices, `q(p) = (G_1[p_1] G_2[p_2] ... G_N[p_N])²`.
//! Squaring keeps `q` nonnegative for arbitrary real cores. The normalizer
//! and the sampling marginals come from contracting doubled cores, and all
//! contractions carry an explicit log-scale so long chains neither overflow
//! nor underflow.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::PruningMask;
use crate::rng;

/// Floor applied to `q(e)` inside the elite log-likelihood.
pub const LIKELIHOOD_FLOOR: f64 = 1e-300;

/// Core of shape `(left, 2, right)`, stored as `data[(a * 2 + x) * right + b]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Core {
    pub left: usize,
    pub right: usize,
    pub data: Vec<f64>,
}

impl Core {
    pub fn zeros(left: usize, right: usize) -> Self {
        Self {
            left,
            right,
            data: vec![0.0; left * 2 * right],
        }
    }

    #[inline]
    pub fn at(&self, a: usize, x: usize, b: usize) -> f64 {
        self.data[(a * 2 + x) * self.right + b]
    }

    #[inline]
    fn at_mut(&mut self, a: usize, x: usize, b: usize) -> &mut f64 {
        &mut self.data[(a * 2 + x) * self.right + b]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.left, 2, self.right)
    }

    /// Row vector times slice `x`: `(v G[x])_b = Σ_a v_a G[a, x, b]`.
    fn row_times(&self, v: &[f64], x: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.right];
        for (a, &va) in v.iter().enumerate() {
            if va == 0.0 {
                continue;
            }
            let row = &self.data[(a * 2 + x) * self.right..(a * 2 + x + 1) * self.right];
            for (o, g) in out.iter_mut().zip(row) {
                *o += va * g;
            }
        }
        out
    }

    /// Slice `x` times column vector: `(G[x] w)_a = Σ_b G[a, x, b] w_b`.
    fn times_col(&self, x: usize, w: &[f64]) -> Vec<f64> {
        (0..self.left)
            .map(|a| {
                let row = &self.data[(a * 2 + x) * self.right..(a * 2 + x + 1) * self.right];
                row.iter().zip(w).map(|(g, v)| g * v).sum()
            })
            .collect()
    }
}

/// Square matrix with a log-scale: value = `exp(log_scale) * m`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledMatrix {
    pub dim: usize,
    pub m: Vec<f64>,
    pub log_scale: f64,
}

impl ScaledMatrix {
    fn identity1() -> Self {
        Self {
            dim: 1,
            m: vec![1.0],
            log_scale: 0.0,
        }
    }

    fn renormalize(mut self) -> Self {
        let max = self.m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if max > 0.0 && max.is_finite() {
            self.m.iter_mut().for_each(|v| *v /= max);
            self.log_scale += max.ln();
        }
        self
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.m[i * self.dim + j]
    }
}

/// Unnormalized distribution `q(p) = g(p)²` over `{0,1}^N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtDistribution {
    rank: usize,
    cores: Vec<Core>,
}

impl TtDistribution {
    /// Positive initialization with entries in `[0.5, 1.5] / sqrt(rank)`.
    ///
    /// Both slices of a core share one draw, so every mask has the same
    /// amplitude and the initial distribution is exactly uniform while the
    /// rank structure stays generic. Independent slices would tilt single-bit
    /// marginals by up to about 0.2 at low rank.
    pub fn init(n: usize, rank: usize, seed: u64) -> Result<Self> {
        if n < 2 || rank < 1 {
            return Err(Error::Argument(format!(
                "tensor train needs n >= 2 and rank >= 1, got n = {n}, rank = {rank}"
            )));
        }
        let mut rng = rng::stream(seed, "tt-init", 0);
        let scale = 1.0 / (rank as f64).sqrt();
        let cores = (0..n)
            .map(|k| {
                let left = if k == 0 { 1 } else { rank };
                let right = if k == n - 1 { 1 } else { rank };
                let mut core = Core::zeros(left, right);
                for a in 0..left {
                    for b in 0..right {
                        let v = rng.random_range(0.5..1.5) * scale;
                        *core.at_mut(a, 0, b) = v;
                        *core.at_mut(a, 1, b) = v;
                    }
                }
                core
            })
            .collect();
        Ok(Self { rank, cores })
    }

    /// Wraps explicit cores after checking the boundary and rank contract.
    pub fn from_cores(cores: Vec<Core>) -> Result<Self> {
        let n = cores.len();
        if n < 2 {
            return Err(Error::Argument("need at least 2 cores".into()));
        }
        let rank = cores[0].right;
        for (k, c) in cores.iter().enumerate() {
            let want_left = if k == 0 { 1 } else { rank };
            let want_right = if k == n - 1 { 1 } else { rank };
            if c.left != want_left || c.right != want_right || c.data.len() != c.left * 2 * c.right
            {
                return Err(Error::Validation(format!(
                    "core {k} has shape ({}, 2, {}), expected ({want_left}, 2, {want_right})",
                    c.left, c.right
                )));
            }
            if c.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "core {k} has non-finite entries"
                )));
            }
        }
        Ok(Self { rank, cores })
    }

    pub fn n(&self) -> usize {
        self.cores.len()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn cores(&self) -> &[Core] {
        &self.cores
    }

    pub fn cores_mut(&mut self) -> &mut [Core] {
        &mut self.cores
    }

    fn check_len(&self, p: &PruningMask) -> Result<()> {
        if p.len() != self.n() {
            return Err(Error::Dimension {
                expected: self.n(),
                actual: p.len(),
            });
        }
        Ok(())
    }

    /// `(ln|g(p)|, sign g(p))`; `ln|g| = -inf` when the chain vanishes.
    pub fn log_amplitude(&self, p: &PruningMask) -> Result<(f64, f64)> {
        self.check_len(p)?;
        let mut v = vec![1.0];
        let mut log_scale = 0.0;
        for (core, &x) in self.cores.iter().zip(p.bits()) {
            v = core.row_times(&v, x as usize);
            let norm = v.iter().fold(0.0f64, |acc, t| acc.max(t.abs()));
            if norm == 0.0 {
                return Ok((f64::NEG_INFINITY, 0.0));
            }
            v.iter_mut().for_each(|t| *t /= norm);
            log_scale += norm.ln();
        }
        Ok((log_scale + v[0].abs().ln(), v[0].signum()))
    }

    /// Chain value `g(p)`.
    pub fn amplitude(&self, p: &PruningMask) -> Result<f64> {
        let (la, sign) = self.log_amplitude(p)?;
        Ok(sign * la.exp())
    }

    /// `ln q(p) = 2 ln|g(p)|`.
    pub fn log_unnorm_prob(&self, p: &PruningMask) -> Result<f64> {
        Ok(2.0 * self.log_amplitude(p)?.0)
    }

    /// `q(p) = g(p)²`.
    pub fn unnorm_prob(&self, p: &PruningMask) -> Result<f64> {
        Ok(self.log_unnorm_prob(p)?.exp())
    }

    /// Left environments of the doubled chain: entry `k` covers cores `0..k`,
    /// `L_{k+1} = Σ_x G_k[x]ᵀ L_k G_k[x]`. Length `N + 1`.
    pub fn left_environments(&self) -> Vec<ScaledMatrix> {
        let mut envs = Vec::with_capacity(self.n() + 1);
        envs.push(ScaledMatrix::identity1());
        for core in &self.cores {
            let prev = envs.last().unwrap();
            let (l, r) = (core.left, core.right);
            let mut next = vec![0.0; r * r];
            for x in 0..2 {
                // t = L G[x]   (l × r)
                let mut t = vec![0.0; l * r];
                for a in 0..l {
                    for c in 0..l {
                        let lac = prev.get(a, c);
                        if lac == 0.0 {
                            continue;
                        }
                        for b in 0..r {
                            t[a * r + b] += lac * core.at(c, x, b);
                        }
                    }
                }
                // next += G[x]ᵀ t
                for a in 0..l {
                    for b in 0..r {
                        let g = core.at(a, x, b);
                        if g == 0.0 {
                            continue;
                        }
                        for d in 0..r {
                            next[b * r + d] += g * t[a * r + d];
                        }
                    }
                }
            }
            envs.push(
                ScaledMatrix {
                    dim: r,
                    m: next,
                    log_scale: prev.log_scale,
                }
                .renormalize(),
            );
        }
        envs
    }

    /// Right environments: entry `k` covers cores `k..N`,
    /// `R_k = Σ_x G_k[x] R_{k+1} G_k[x]ᵀ`. Length `N + 1`, `R_N = [1]`.
    pub fn right_environments(&self) -> Vec<ScaledMatrix> {
        let n = self.n();
        let mut envs = vec![ScaledMatrix::identity1(); n + 1];
        for k in (0..n).rev() {
            let core = &self.cores[k];
            let prev = &envs[k + 1];
            let (l, r) = (core.left, core.right);
            let mut next = vec![0.0; l * l];
            for x in 0..2 {
                // t = G[x] R   (l × r)
                let mut t = vec![0.0; l * r];
                for a in 0..l {
                    for c in 0..r {
                        let g = core.at(a, x, c);
                        if g == 0.0 {
                            continue;
                        }
                        for b in 0..r {
                            t[a * r + b] += g * prev.get(c, b);
                        }
                    }
                }
                // next += t G[x]ᵀ
                for a in 0..l {
                    for d in 0..l {
                        let mut s = 0.0;
                        for b in 0..r {
                            s += t[a * r + b] * core.at(d, x, b);
                        }
                        next[a * l + d] += s;
                    }
                }
            }
            envs[k] = ScaledMatrix {
                dim: l,
                m: next,
                log_scale: prev.log_scale,
            }
            .renormalize();
        }
        envs
    }

    /// `ln Z` with `Z = Σ_p q(p)`, by contraction.
    pub fn log_normalizer(&self) -> f64 {
        let envs = self.left_environments();
        let last = envs.last().unwrap();
        last.log_scale + last.m[0].ln()
    }

    pub fn normalizer(&self) -> f64 {
        self.log_normalizer().exp()
    }

    /// `q(p) / Z`.
    pub fn prob(&self, p: &PruningMask) -> Result<f64> {
        Ok((self.log_unnorm_prob(p)? - self.log_normalizer()).exp())
    }

    /// Conditional law `P(p_k = 1 | prefix)` for each step of left-to-right
    /// sampling along `p` (without exploration mixing).
    pub fn conditionals(&self, p: &PruningMask) -> Result<Vec<[f64; 2]>> {
        self.check_len(p)?;
        let right = self.right_environments();
        let mut v = vec![1.0];
        let mut out = Vec::with_capacity(self.n());
        for (k, core) in self.cores.iter().enumerate() {
            let (probs, u) = step_probs(core, &v, &right[k + 1]);
            out.push(probs);
            v = normalized(u[p.bits()[k] as usize].clone());
        }
        Ok(out)
    }

    /// Draws one mask, mixing each conditional with the fair coin:
    /// `P = (1 - eps) P_tt + eps / 2`.
    pub fn sample_with(&self, right: &[ScaledMatrix], eps: f64, rng: &mut impl Rng) -> PruningMask {
        let mut bits = Vec::with_capacity(self.n());
        let mut v = vec![1.0];
        for (k, core) in self.cores.iter().enumerate() {
            let (probs, mut u) = step_probs(core, &v, &right[k + 1]);
            let p1 = (1.0 - eps) * probs[1] + 0.5 * eps;
            let x = usize::from(rng.random::<f64>() < p1);
            bits.push(x as u8);
            v = normalized(std::mem::take(&mut u[x]));
        }
        PruningMask::from_bits(bits).expect("bits are binary")
    }

    pub fn sample(&self, eps: f64, rng: &mut impl Rng) -> PruningMask {
        let right = self.right_environments();
        self.sample_with(&right, eps, rng)
    }

    /// `Σ_e [max(ln q(e), ln floor) - ln Z]`.
    pub fn log_likelihood(&self, elites: &[PruningMask]) -> Result<f64> {
        let log_z = self.log_normalizer();
        let floor = LIKELIHOOD_FLOOR.ln();
        let mut total = 0.0;
        for e in elites {
            total += self.log_unnorm_prob(e)?.max(floor) - log_z;
        }
        Ok(total)
    }

    /// Log-likelihood of `elites` and its gradient with respect to every core entry.
    pub fn log_likelihood_grad(&self, elites: &[PruningMask]) -> Result<(f64, Vec<Vec<f64>>)> {
        let n = self.n();
        for e in elites {
            self.check_len(e)?;
        }
        let left = self.left_environments();
        let right = self.right_environments();
        let z_last = left.last().unwrap();
        let log_z = z_last.log_scale + z_last.m[0].ln();
        if !log_z.is_finite() {
            return Err(Error::Degenerate(format!(
                "normalizer is {} (all masks have zero mass)",
                log_z.exp()
            )));
        }
        let mut grads: Vec<Vec<f64>> = self.cores.iter().map(|c| vec![0.0; c.data.len()]).collect();
        let floor = LIKELIHOOD_FLOOR.ln();
        let mut loglik = 0.0;

        for e in elites {
            let bits = e.bits();
            // normalized prefixes l_k (before core k) and suffixes r_k (from core k on)
            let mut prefixes = Vec::with_capacity(n);
            let mut v = vec![1.0];
            let mut log_l = 0.0;
            let mut dead = false;
            for (k, core) in self.cores.iter().enumerate() {
                prefixes.push(v.clone());
                let u = core.row_times(&v, bits[k] as usize);
                let norm = u.iter().fold(0.0f64, |acc, t| acc.max(t.abs()));
                if norm == 0.0 {
                    dead = true;
                    break;
                }
                log_l += norm.ln();
                v = u.into_iter().map(|t| t / norm).collect();
            }
            let log_q = if dead {
                f64::NEG_INFINITY
            } else {
                2.0 * (log_l + v[0].abs().ln())
            };
            loglik += log_q.max(floor) - log_z;
            if !(log_q > floor) {
                continue;
            }
            let mut w = vec![1.0];
            for k in (0..n).rev() {
                let core = &self.cores[k];
                let x = bits[k] as usize;
                let l = &prefixes[k];
                let g = {
                    let u = core.row_times(l, x);
                    u.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
                };
                let grad = &mut grads[k];
                for (a, &la) in l.iter().enumerate() {
                    for (b, &wb) in w.iter().enumerate() {
                        grad[(a * 2 + x) * core.right + b] += 2.0 * la * wb / g;
                    }
                }
                let next = core.times_col(x, &w);
                let norm = next.iter().fold(0.0f64, |acc, t| acc.max(t.abs()));
                w = next.into_iter().map(|t| t / norm).collect();
            }
        }

        // - |E| ∂ ln Z = - |E| 2 L_k G_k[x] R_{k+1} / z_k
        let count = elites.len() as f64;
        for (k, core) in self.cores.iter().enumerate() {
            let (lenv, renv) = (&left[k], &right[k + 1]);
            let (l, r) = (core.left, core.right);
            let mut lgr = vec![0.0; l * 2 * r];
            let mut z_local = 0.0;
            for x in 0..2 {
                for a in 0..l {
                    // (L G[x])_{a, c}
                    let mut lg = vec![0.0; r];
                    for c in 0..l {
                        let lac = lenv.get(a, c);
                        if lac == 0.0 {
                            continue;
                        }
                        for (t, cb) in lg.iter_mut().enumerate() {
                            *cb += lac * core.at(c, x, t);
                        }
                    }
                    for b in 0..r {
                        let mut s = 0.0;
                        for (c, &lgc) in lg.iter().enumerate() {
                            s += lgc * renv.get(c, b);
                        }
                        lgr[(a * 2 + x) * r + b] = s;
                        z_local += core.at(a, x, b) * s;
                    }
                }
            }
            let grad = &mut grads[k];
            for (gv, v) in grad.iter_mut().zip(&lgr) {
                *gv -= count * 2.0 * v / z_local;
            }
        }
        Ok((loglik, grads))
    }
}

fn normalized(mut u: Vec<f64>) -> Vec<f64> {
    let norm = u.iter().fold(0.0f64, |acc, t| acc.max(t.abs()));
    if norm > 0.0 {
        u.iter_mut().for_each(|t| *t /= norm);
    }
    u
}

/// Conditional probabilities of the next bit given the normalized prefix `v`.
fn step_probs(core: &Core, v: &[f64], right: &ScaledMatrix) -> ([f64; 2], [Vec<f64>; 2]) {
    let u = [core.row_times(v, 0), core.row_times(v, 1)];
    let mut w = [0.0; 2];
    for x in 0..2 {
        let ux = &u[x];
        let mut s = 0.0;
        for a in 0..right.dim {
            let mut t = 0.0;
            for b in 0..right.dim {
                t += right.get(a, b) * ux[b];
            }
            s += ux[a] * t;
        }
        w[x] = s.max(0.0);
    }
    let total = w[0] + w[1];
    let probs = if total > 0.0 && total.is_finite() {
        [w[0] / total, w[1] / total]
    } else {
        [0.5, 0.5]
    };
    (probs, u)
}

/// Adam moments for every core entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(dist: &TtDistribution) -> Self {
        let zeros: Vec<Vec<f64>> = dist
            .cores()
            .iter()
            .map(|c| vec![0.0; c.data.len()])
            .collect();
        Self {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam ascent step on the elite log-likelihood. Returns the updated
/// distribution and the log-likelihood before the step.
pub fn update_elites(
    dist: &TtDistribution,
    adam: &mut AdamState,
    elites: &[PruningMask],
    learn_rate: f64,
) -> Result<(TtDistribution, f64)> {
    if elites.is_empty() {
        return Err(Error::Argument("update needs at least one elite".into()));
    }
    let (loglik, grads) = dist.log_likelihood_grad(elites)?;
    adam.step += 1;
    let t = adam.step as i32;
    let bc1 = 1.0 - adam.beta1.powi(t);
    let bc2 = 1.0 - adam.beta2.powi(t);
    let mut next = dist.clone();
    for (k, core) in next.cores.iter_mut().enumerate() {
        for (i, theta) in core.data.iter_mut().enumerate() {
            let g = grads[k][i];
            let m = &mut adam.m[k][i];
            let v = &mut adam.v[k][i];
            *m = adam.beta1 * *m + (1.0 - adam.beta1) * g;
            *v = adam.beta2 * *v + (1.0 - adam.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *theta += learn_rate * m_hat / (v_hat.sqrt() + adam.eps);
        }
    }
    if next
        .cores
        .iter()
        .any(|c| c.data.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Degenerate(
            "core update produced non-finite entries".into(),
        ));
    }
    Ok((next, loglik))
}

impl Core {
    /// Mutable entry access for tests and checkpoint restoration.
    pub fn set(&mut self, a: usize, x: usize, b: usize, value: f64) {
        *self.at_mut(a, x, b) = value;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_masks(n: usize) -> Vec<PruningMask> {
        (0..1u32 << n)
            .map(|code| {
                PruningMask::from_bits((0..n).map(|i| ((code >> (n - 1 - i)) & 1) as u8).collect())
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn init_shapes() {
        let d = TtDistribution::init(2, 1, 0).unwrap();
        assert_eq!(d.cores()[0].shape(), (1, 2, 1));
        assert_eq!(d.cores()[1].shape(), (1, 2, 1));
        let d = TtDistribution::init(5, 3, 0).unwrap();
        let shapes: Vec<_> = d.cores().iter().map(Core::shape).collect();
        assert_eq!(
            shapes,
            vec![(1, 2, 3), (3, 2, 3), (3, 2, 3), (3, 2, 3), (3, 2, 1)]
        );
        assert!(TtDistribution::init(1, 3, 0).is_err());
        assert!(TtDistribution::init(4, 0, 0).is_err());
        assert_eq!(
            TtDistribution::init(6, 4, 9).unwrap(),
            TtDistribution::init(6, 4, 9).unwrap()
        );
    }

    #[test]
    fn init_is_uniform() {
        let d = TtDistribution::init(6, 3, 2).unwrap();
        for m in all_masks(6) {
            assert!((d.prob(&m).unwrap() - 1.0 / 64.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn rank_one_factorizes() {
        let d = TtDistribution::init(4, 1, 3).unwrap();
        let p = PruningMask::parse("1001").unwrap();
        let expected: f64 = d
            .cores()
            .iter()
            .zip(p.bits())
            .map(|(c, &x)| c.at(0, x as usize, 0).powi(2))
            .product();
        let got = d.unnorm_prob(&p).unwrap();
        assert!((got - expected).abs() <= 1e-14 * expected);
    }

    #[test]
    fn normalizer_matches_enumeration() {
        for (n, r) in [(2, 1), (5, 2), (8, 3)] {
            let d = TtDistribution::init(n, r, 11).unwrap();
            let brute: f64 = all_masks(n).iter().map(|m| d.unnorm_prob(m).unwrap()).sum();
            let z = d.normalizer();
            assert!(((z - brute) / brute).abs() < 1e-12, "n={n} r={r}");
        }
    }

    #[test]
    fn conditionals_are_distributions() {
        let d = TtDistribution::init(7, 3, 2).unwrap();
        for c in d
            .conditionals(&PruningMask::parse("0110100").unwrap())
            .unwrap()
        {
            assert!(c[0] >= 0.0 && c[1] >= 0.0);
            assert!((c[0] + c[1] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_cores() {
        let d = TtDistribution::init(5, 2, 1).unwrap();
        let mut adam = AdamState::new(&d);
        let (next, _) =
            update_elites(&d, &mut adam, &[PruningMask::parse("10101").unwrap()], 0.0).unwrap();
        assert_eq!(next.cores(), d.cores());
    }

    #[test]
    fn update_rejects_empty_elites() {
        let d = TtDistribution::init(3, 2, 1).unwrap();
        let mut adam = AdamState::new(&d);
        assert!(update_elites(&d, &mut adam, &[], 0.02).is_err());
    }

    #[test]
    fn vanishing_chain_hits_floor() {
        let mut d = TtDistribution::init(3, 1, 0).unwrap();
        d.cores_mut()[1].set(0, 1, 0, 0.0);
        let e = PruningMask::parse("010").unwrap();
        assert_eq!(d.unnorm_prob(&e).unwrap(), 0.0);
        let (ll, grads) = d.log_likelihood_grad(&[e]).unwrap();
        assert!(ll.is_finite());
        assert!(grads.iter().flatten().all(|g| g.is_finite()));
    }

    #[test]
    fn long_chains_stay_finite() {
        let d = TtDistribution::init(2000, 4, 5).unwrap();
        assert!(d.log_normalizer().is_finite());
        let mut r = rng::stream(1, "t", 0);
        let m = d.sample(0.03, &mut r);
        assert!(d.log_unnorm_prob(&m).unwrap().is_finite());
        let (ll, _) = d.log_likelihood_grad(&[m]).unwrap();
        assert!(ll.is_finite());
    }
}
