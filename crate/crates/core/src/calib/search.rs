use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{attention_weights, Linear, Windows};
use crate::quant::{affine_from_bounds, levels};
use crate::quant::params::code;
use crate::{Scalar, Tensor};

use super::focus::{dist_pcc_scoped, MaxScope};
use super::grid::{ClipSearchGrid, GridConfig};

/// Winning clipping range of a search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome<T> {
    pub low: T,
    pub up: T,
    pub objective: f64,
    pub evaluated: usize,
}

/// Index and objective of the best candidate; ties go to the narrower range.
pub fn argmin_candidates<T: Scalar>(
    candidates: &[(T, T)],
    mut objective: impl FnMut(T, T) -> Result<f64>,
) -> Result<(usize, f64)> {
    if candidates.is_empty() {
        return Err(Error::Contract("empty clipping grid".into()));
    }
    let mut best: Option<(usize, f64, T)> = None;
    for (i, &(lo, up)) in candidates.iter().enumerate() {
        let v = objective(lo, up)?;
        if v.is_nan() {
            return Err(Error::NonFinite(format!("objective at [{lo}, {up}]")));
        }
        let w = up - lo;
        let better = match best {
            None => true,
            Some((_, bv, bw)) => v < bv || (v == bv && w < bw),
        };
        if better {
            best = Some((i, v, w));
        }
    }
    let (i, v, _) = best.expect("nonempty");
    Ok((i, v))
}

/// Fake quantization of a slice with one clipping range.
pub fn fake_quant_range<T: Scalar>(x: &[T], lo: T, up: T, bits: u32) -> Result<Vec<T>> {
    let (s, z, _) = affine_from_bounds(lo, up, bits)?;
    let n = T::lit(levels(bits) as f64);
    let zf = T::lit(z as f64);
    Ok(x
        .iter()
        .map(|&v| {
            let q = code(v / s, zf, n);
            s * (q - zf)
        })
        .collect())
}

/// Sum of squared fake-quant errors. Multiplies by `1/s` instead of
/// dividing, so exact ties may round differently from [`fake_quant_range`].
pub fn quant_sq_error<T: Scalar>(x: &[T], lo: T, up: T, bits: u32) -> Result<f64> {
    let (s, z, _) = affine_from_bounds(lo, up, bits)?;
    let n = T::lit(levels(bits) as f64);
    let zf = T::lit(z as f64);
    let inv = T::one() / s;
    let (rlo, rhi) = (-zf - T::one(), n - zf + T::one());
    let mut acc = [T::zero(); 4];
    let mut chunks = x.chunks_exact(4);
    let err = |v: T| {
        let r = (v * inv).max(rlo).min(rhi).round_half_even_small();
        let q = (r + zf).max(T::zero()).min(n);
        let d = s * (q - zf) - v;
        d * d
    };
    for c in &mut chunks {
        for j in 0..4 {
            acc[j] += err(c[j]);
        }
    }
    let mut total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for &v in chunks.remainder() {
        total += err(v);
    }
    Ok(total.as_f64())
}

fn observed_range<T: Scalar>(samples: &[&[T]]) -> Result<(T, T)> {
    let mut lo = T::infinity();
    let mut up = T::neg_infinity();
    for s in samples {
        for &v in s.iter() {
            lo = lo.min(v);
            up = up.max(v);
        }
    }
    if !(lo.is_finite() && up.is_finite()) {
        return Err(Error::Contract("no finite calibration values".into()));
    }
    Ok((lo, up))
}

/// Mean squared fake-quant error over all samples, minimized over `grid`.
pub fn search_clip_mse<T: Scalar>(samples: &[&[T]], grid: &ClipSearchGrid<T>, bits: u32) -> Result<SearchOutcome<T>> {
    let count: usize = samples.iter().map(|s| s.len()).sum();
    let (i, obj) = argmin_candidates(&grid.candidates, |lo, up| {
        let mut e = 0.0;
        for s in samples {
            e += quant_sq_error(s, lo, up, bits)?;
        }
        Ok(e / count.max(1) as f64)
    })?;
    let (low, up) = grid.candidates[i];
    Ok(SearchOutcome {
        low,
        up,
        objective: obj,
        evaluated: grid.len(),
    })
}

/// Local stages after the symmetric pass: the per-side sweep (when
/// enabled) then the asymmetric refinement, each around the running winner.
/// A stage only replaces the winner when strictly better, or equal and
/// narrower. Returns the final candidate, its objective and the number of
/// evaluations spent.
fn local_stages<T: Scalar>(
    grid: &ClipSearchGrid<T>,
    cfg: &GridConfig,
    start: (usize, usize),
    start_v: f64,
    mut objective: impl FnMut(T, T) -> Result<f64>,
) -> Result<((T, T), f64, usize)> {
    let (a, b) = start;
    let mut best = (grid.pair_at(a, b), start_v);
    let mut idx = start;
    let mut evaluated = 0;
    let mut stage = |g: ClipSearchGrid<T>, best: &mut ((T, T), f64), idx: &mut (usize, usize)| -> Result<usize> {
        if g.is_empty() {
            return Ok(0);
        }
        let (i, v) = argmin_candidates(&g.candidates, &mut objective)?;
        let (lo, up) = g.candidates[i];
        let (cur, cur_v) = *best;
        if v < cur_v || (v == cur_v && up - lo < cur.1 - cur.0) {
            *best = ((lo, up), v);
            *idx = g.index[i];
        }
        Ok(g.len())
    };
    if cfg.per_side {
        evaluated += stage(grid.side_sweep(a, b), &mut best, &mut idx)?;
    }
    if cfg.refine > 0 {
        evaluated += stage(grid.refinement(idx.0, idx.1, cfg.refine), &mut best, &mut idx)?;
    }
    Ok((best.0, best.1, evaluated))
}

/// Symmetric-shrink MSE search followed by the per-side and asymmetric
/// refinement stages.
pub fn calibrate_mse<T: Scalar>(samples: &[&[T]], cfg: &GridConfig, bits: u32, symmetric: bool) -> Result<SearchOutcome<T>> {
    let (mut lo, mut up) = observed_range(samples)?;
    if symmetric {
        (lo, up) = crate::quant::symmetric_bounds(lo, up);
    }
    let grid = ClipSearchGrid::symmetric(lo, up, cfg)?;
    let first = search_clip_mse(samples, &grid, bits)?;
    if symmetric {
        return Ok(first);
    }
    let count: usize = samples.iter().map(|s| s.len()).sum();
    let start = grid.index_of((first.low, first.up)).expect("winner in grid");
    let ((low, up), objective, extra) = local_stages(&grid, cfg, start, first.objective, |lo, up| {
        let mut e = 0.0;
        for s in samples {
            e += quant_sq_error(s, lo, up, bits)?;
        }
        Ok(e / count.max(1) as f64)
    })?;
    Ok(SearchOutcome {
        low,
        up,
        objective,
        evaluated: grid.len() + extra,
    })
}

/// Observed min/max, widened when degenerate.
pub fn calibrate_minmax<T: Scalar>(samples: &[&[T]], symmetric: bool) -> Result<SearchOutcome<T>> {
    let (mut lo, mut up) = observed_range(samples)?;
    if symmetric {
        (lo, up) = crate::quant::symmetric_bounds(lo, up);
    }
    let (low, up) = super::grid::widen_degenerate(lo, up);
    Ok(SearchOutcome {
        low,
        up,
        objective: 0.0,
        evaluated: 1,
    })
}

/// The four query/key tensors of an attention module, in search order.
pub const QK_SLOTS: [&str; 4] = ["q.in", "k.in", "q.out", "k.out"];

/// Everything needed to recompute one module's attention weights under
/// quantized query/key tensors.
#[derive(Clone, Debug)]
pub struct AttentionProbe<T> {
    pub module: String,
    pub heads: usize,
    pub windows: Option<Windows>,
    /// Inputs of the query and key projections, one pair per sample.
    pub samples: Vec<(Tensor<T>, Tensor<T>)>,
    pub q_lin: Linear<T>,
    pub k_lin: Linear<T>,
}

/// Settings of the focus-overlap search.
#[derive(Clone, Debug, PartialEq)]
pub struct PccSearch {
    pub theta: f64,
    pub scope: MaxScope,
    pub bits: u32,
    pub sweeps: usize,
    pub grid: GridConfig,
}

struct ProbeState<'a, T: Scalar> {
    probe: &'a AttentionProbe<T>,
    fp_weights: Vec<Tensor<T>>,
    cfg: &'a PccSearch,
}

type Ranges<T> = [Option<(T, T)>; 4];

impl<T: Scalar> ProbeState<'_, T> {
    fn quant(&self, x: &Tensor<T>, r: Option<(T, T)>) -> Result<Tensor<T>> {
        match r {
            None => Ok(x.clone()),
            Some((lo, up)) => Tensor::new(x.shape().to_vec(), fake_quant_range(x.data(), lo, up, self.cfg.bits)?),
        }
    }

    /// Query (`side == 0`) or key projections of every sample.
    fn project(&self, side: usize, r: Option<(T, T)>) -> Result<Vec<Tensor<T>>> {
        let lin = if side == 0 { &self.probe.q_lin } else { &self.probe.k_lin };
        self.probe
            .samples
            .iter()
            .map(|(q, k)| lin.apply(&self.quant(if side == 0 { q } else { k }, r)?))
            .collect()
    }

    /// Mean distance with every slot at `state` except `slot` at `cand`;
    /// projections of the current inputs are passed in.
    fn eval(&self, state: &Ranges<T>, slot: usize, cand: (T, T), proj: &[Vec<Tensor<T>>; 2]) -> Result<f64> {
        let mut st = *state;
        st[slot] = Some(cand);
        let fresh = match slot {
            0 | 1 => Some(self.project(slot, st[slot])?),
            _ => None,
        };
        let qs = if slot == 0 { fresh.as_ref().expect("projected") } else { &proj[0] };
        let ks = if slot == 1 { fresh.as_ref().expect("projected") } else { &proj[1] };
        let mut total = 0.0;
        for ((q, k), fp) in qs.iter().zip(ks).zip(&self.fp_weights) {
            let q = self.quant(q, st[2])?;
            let k = self.quant(k, st[3])?;
            let a = attention_weights(&q, &k, self.probe.heads, self.probe.windows.as_ref())?;
            total += dist_pcc_scoped(fp, &a, self.cfg.theta, self.cfg.scope)?;
        }
        Ok(total / self.fp_weights.len() as f64)
    }
}

fn range_of<T: Scalar>(ts: &[Tensor<T>]) -> (T, T) {
    ts.iter().fold((T::infinity(), T::neg_infinity()), |(lo, up), t| {
        let (a, b) = t.min_max();
        (lo.min(a), up.max(b))
    })
}

/// Coordinate-descent search of the four query/key clipping ranges that
/// minimize the mean focus-overlap distance to the full-precision attention.
///
/// The first sweep holds not-yet-visited tensors at full precision. Each
/// tensor's grid is built from its observed range over the probe samples.
pub fn search_clip_pcc<T: Scalar>(probe: &AttentionProbe<T>, cfg: &PccSearch) -> Result<BTreeMap<String, SearchOutcome<T>>> {
    if probe.samples.is_empty() {
        return Err(Error::Contract(format!("no calibration sample for {}", probe.module)));
    }
    let mut st = ProbeState { probe, fp_weights: Vec::new(), cfg };
    let q_fp = st.project(0, None)?;
    let k_fp = st.project(1, None)?;
    st.fp_weights = q_fp
        .iter()
        .zip(&k_fp)
        .map(|(q, k)| attention_weights(q, k, probe.heads, probe.windows.as_ref()))
        .collect::<Result<_>>()?;
    let q_in: Vec<Tensor<T>> = probe.samples.iter().map(|s| s.0.clone()).collect();
    let k_in: Vec<Tensor<T>> = probe.samples.iter().map(|s| s.1.clone()).collect();
    let grids = [range_of(&q_in), range_of(&k_in), range_of(&q_fp), range_of(&k_fp)]
        .into_iter()
        .map(|(lo, up)| ClipSearchGrid::symmetric(lo, up, &cfg.grid))
        .collect::<Result<Vec<_>>>()?;
    let mut state: Ranges<T> = [None; 4];
    let mut winner: [(usize, f64); 4] = [(0, f64::NAN); 4];
    let mut evaluated = [0usize; 4];
    for _ in 0..cfg.sweeps.max(1) {
        for slot in 0..4 {
            let proj = [st.project(0, state[0])?, st.project(1, state[1])?];
            let (i, v) = argmin_candidates(&grids[slot].candidates, |lo, up| st.eval(&state, slot, (lo, up), &proj))?;
            state[slot] = Some(grids[slot].candidates[i]);
            winner[slot] = (i, v);
            evaluated[slot] += grids[slot].len();
        }
    }
    for slot in 0..4 {
        let proj = [st.project(0, state[0])?, st.project(1, state[1])?];
        let start = grids[slot].index[winner[slot].0];
        // Later slots moved since this one was chosen.
        let cur_v = st.eval(&state, slot, state[slot].expect("set by sweep"), &proj)?;
        evaluated[slot] += 1;
        let (best, v, extra) = local_stages(&grids[slot], &cfg.grid, start, cur_v, |lo, up| {
            st.eval(&state, slot, (lo, up), &proj)
        })?;
        state[slot] = Some(best);
        winner[slot].1 = v;
        evaluated[slot] += extra;
    }
    Ok(QK_SLOTS
        .iter()
        .enumerate()
        .map(|(slot, name)| {
            let (low, up) = state[slot].expect("every slot searched");
            (
                format!("{}.{name}", probe.module),
                SearchOutcome {
                    low,
                    up,
                    objective: winner[slot].1,
                    evaluated: evaluated[slot],
                },
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_break_prefers_narrow() {
        let c = [(-2.0f64, 2.0), (-1.0, 1.0), (-1.5, 1.5)];
        assert_eq!(argmin_candidates(&c, |_, _| Ok(0.0)).unwrap(), (1, 0.0));
        assert!(argmin_candidates::<f64>(&[], |_, _| Ok(0.0)).is_err());
    }

    #[test]
    fn mse_matches_brute_force() {
        let x = [0.3f64, -1.2, 2.5, 0.0, 7.0];
        let g = ClipSearchGrid::symmetric(-1.2, 7.0, &GridConfig::default()).unwrap();
        let out = search_clip_mse(&[&x], &g, 4).unwrap();
        let mut best = (f64::INFINITY, 0.0);
        for &(lo, up) in &g.candidates {
            let qp = crate::quant::params_from_bounds(lo, up, 4).unwrap();
            let t = Tensor::from_f64(&[5], &x).unwrap();
            let e = crate::quant::fake_quant(&t, &qp).unwrap().mse(&t).unwrap();
            if e < best.0 - 1e-15 {
                best = (e, up - lo);
            }
        }
        assert!((out.objective - best.0).abs() < 1e-12);
    }
}
