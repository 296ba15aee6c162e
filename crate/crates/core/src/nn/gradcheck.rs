//! Central finite-difference gradient checking for `f32` models.

/// Outcome of [`check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Indices compared against the analytic gradient.
    pub checked: Vec<usize>,
    /// Largest relative error among checked indices.
    pub max_rel_err: f64,
    /// Candidates passed over: gradient below the floor, or a step that
    /// straddles an activation kink (the two step sizes disagree).
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckCfg {
    pub step: f32,
    /// Ignore candidates whose analytic gradient is smaller than this;
    /// their finite differences drown in single-precision noise.
    pub min_abs_grad: f64,
    pub want: usize,
}

impl Default for GradCheckCfg {
    fn default() -> Self {
        GradCheckCfg {
            step: 1e-2,
            min_abs_grad: 1e-3,
            want: 4,
        }
    }
}

fn central(params: &mut [f32], idx: usize, h: f32, loss: &mut impl FnMut(&[f32]) -> f64) -> f64 {
    let orig = params[idx];
    let (up, down) = (orig + h, orig - h);
    params[idx] = up;
    let lp = loss(params);
    params[idx] = down;
    let lm = loss(params);
    params[idx] = orig;
    (lp - lm) / (up as f64 - down as f64)
}

/// Compare `analytic` to central differences of `loss` for up to
/// `cfg.want` indices taken in order from `candidates`.
pub fn check(
    params: &mut [f32],
    analytic: &[f32],
    candidates: impl IntoIterator<Item = usize>,
    cfg: GradCheckCfg,
    mut loss: impl FnMut(&[f32]) -> f64,
) -> GradCheck {
    let mut out = GradCheck {
        checked: Vec::new(),
        max_rel_err: 0.0,
        skipped: 0,
    };
    for idx in candidates {
        if out.checked.len() >= cfg.want {
            break;
        }
        let a = analytic[idx] as f64;
        if a.abs() < cfg.min_abs_grad {
            out.skipped += 1;
            continue;
        }
        let n1 = central(params, idx, cfg.step, &mut loss);
        let n2 = central(params, idx, cfg.step / 2.0, &mut loss);
        if (n1 - n2).abs() > 1e-3 * n1.abs().max(n2.abs()) {
            out.skipped += 1;
            continue;
        }
        let rel = (n2 - a).abs() / n2.abs().max(a.abs());
        out.max_rel_err = out.max_rel_err.max(rel);
        out.checked.push(idx);
    }
    out
}

/// Deterministic pseudo-random visiting order over `0..n`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut crate::rng::rng(seed));
    idx
}
