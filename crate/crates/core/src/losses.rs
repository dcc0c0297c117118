//! Distillation objectives: feature distances, quantile masks, the margin
//! separation constraint and the weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::kernels::quantile_in_place;
use crate::numeric::{Element, Graph, NdArray, Var};

/// Spatial reduction used by the separation constraint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DfscReduction {
    /// Mean over locations with at least one selected channel.
    #[default]
    ActiveMean,
    /// Mean over all `H x W` locations; unselected locations contribute `m`.
    AllLocations,
}

/// Where the channel L2 normalization sits relative to the quantile mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeOrder {
    /// Normalize full channel vectors, then zero unselected channels.
    #[default]
    BeforeMask,
    /// Zero unselected channels, then normalize what remains.
    AfterMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub margin: f64,
    pub q_ts: f64,
    pub q_ta: f64,
    /// When false the constraint term is dropped (logged as zero).
    pub dfsc: bool,
    pub dfsc_reduction: DfscReduction,
    pub normalize_order: NormalizeOrder,
    /// Stop the student-to-autoencoder distance from moving the auto-encoder.
    pub sa_detach_autoencoder: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 2.0,
            margin: 0.4,
            q_ts: 0.999,
            q_ta: 0.999,
            dfsc: true,
            dfsc_reduction: DfscReduction::ActiveMean,
            normalize_order: NormalizeOrder::BeforeMask,
            sa_detach_autoencoder: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.margin) {
            return Err(Error::Config(format!(
                "margin {} outside [0, 2]",
                self.margin
            )));
        }
        for (name, q) in [("q_ts", self.q_ts), ("q_ta", self.q_ta)] {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::Config(format!("{name} = {q} outside [0, 1]")));
            }
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha {} must be >= 0", self.alpha)));
        }
        Ok(())
    }
}

/// The four loss terms of one step and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub d_sa: f64,
    pub d_ta: f64,
    pub d_ts_masked: f64,
    pub l_dfsc: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn from_terms(d_sa: f64, d_ta: f64, d_ts_masked: f64, l_dfsc: f64, alpha: f64) -> Self {
        LossBundle {
            d_sa,
            d_ta,
            d_ts_masked,
            l_dfsc,
            total: d_sa + d_ta + d_ts_masked + alpha * l_dfsc,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.d_sa, self.d_ta, self.d_ts_masked, self.l_dfsc, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Mean squared difference over all elements.
pub fn msd<T: Element>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// 1 where `diff_sq >= quantile(diff_sq, q)`, else 0. Carries no gradient.
pub fn hard_mask<T: Element>(diff_sq: &NdArray<T>, q: f64) -> Result<NdArray<T>> {
    let mut scratch: Vec<f64> = diff_sq.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let tau = quantile_in_place(&mut scratch, q)?;
    Ok(diff_sq.map(|v| {
        if v.to_f64().unwrap_or(f64::NAN) >= tau {
            T::one()
        } else {
            T::zero()
        }
    }))
}

fn squared_diff<T: Element>(a: &NdArray<T>, b: &NdArray<T>, op: &'static str) -> Result<NdArray<T>> {
    a.ensure_same_shape(b, op)?;
    NdArray::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .collect(),
    )
}

/// Squared teacher/student distance restricted to elements at or above the
/// `q_ts` quantile of the current squared-difference map.
pub fn masked_ts_loss<T: Element>(g: &mut Graph<T>, t: Var, s_t: Var, q_ts: f64) -> Result<Var> {
    let d = g.sub(t, s_t)?;
    let sq = g.square(d);
    let mask = hard_mask(g.value(sq), q_ts)?;
    let count = mask.sum_f64();
    let masked = g.mul_const(sq, &mask)?;
    let total = g.sum(masked);
    Ok(g.scale(total, T::from_f64_lossy(1.0 / count.max(1.0))))
}

#[derive(Clone, Copy, Debug)]
pub struct DfscOutput {
    pub loss: Var,
    pub active_locations: usize,
    /// Set when the mask selected nothing and the loss was forced to zero.
    pub no_active_locations: bool,
}

/// Margin hinge keeping the auto-encoder at least `margin` away from the
/// teacher on the features where they disagree most.
///
/// Gradient flows into `a` only; the teacher map and the mask are constants.
pub fn dfsc_loss<T: Element>(
    g: &mut Graph<T>,
    t: Var,
    a: Var,
    q_ta: f64,
    margin: f64,
    reduction: DfscReduction,
    order: NormalizeOrder,
) -> Result<DfscOutput> {
    let diff_sq = squared_diff(g.value(t), g.value(a), "dfsc_loss")?;
    let mask = hard_mask(&diff_sq, q_ta)?;
    dfsc_loss_with_mask(g, t, a, &mask, margin, reduction, order)
}

/// [`dfsc_loss`] with a caller-supplied mask.
pub fn dfsc_loss_with_mask<T: Element>(
    g: &mut Graph<T>,
    t: Var,
    a: Var,
    mask: &NdArray<T>,
    margin: f64,
    reduction: DfscReduction,
    order: NormalizeOrder,
) -> Result<DfscOutput> {
    let (c, h, w) = g.value(t).dims3("dfsc_loss")?;
    g.value(t).ensure_same_shape(g.value(a), "dfsc_loss")?;
    mask.ensure_same_shape(g.value(t), "dfsc_loss mask")?;
    let plane = h * w;
    let active: Vec<bool> = (0..plane)
        .map(|p| (0..c).any(|ch| mask.data()[ch * plane + p] > T::zero()))
        .collect();
    let n_active = active.iter().filter(|&&x| x).count();

    let t_const = g.detach(t);
    let (t_sel, a_sel) = match order {
        NormalizeOrder::BeforeMask => {
            let tn = g.channel_normalize(t_const)?;
            let an = g.channel_normalize(a)?;
            (g.mul_const(tn, mask)?, g.mul_const(an, mask)?)
        }
        NormalizeOrder::AfterMask => {
            let tm = g.mul_const(t_const, mask)?;
            let am = g.mul_const(a, mask)?;
            (g.channel_normalize(tm)?, g.channel_normalize(am)?)
        }
    };
    let diff = g.sub(t_sel, a_sel)?;
    let dist = g.channel_norm(diff)?;
    // max(m - D, 0) = m - min(D, m); the second form returns m exactly when
    // every D is zero and 0 exactly when m is zero.
    let m = T::from_f64_lossy(margin);
    let reached = g.clamp_max(dist, m);

    let mean_reached = match reduction {
        DfscReduction::ActiveMean => {
            if n_active == 0 {
                let z = g.scale(reached, T::zero());
                let loss = g.sum(z);
                return Ok(DfscOutput {
                    loss,
                    active_locations: 0,
                    no_active_locations: true,
                });
            }
            let indicator = NdArray::new(
                vec![1, h, w],
                active.iter().map(|&x| if x { T::one() } else { T::zero() }).collect(),
            )?;
            let kept = g.mul_const(reached, &indicator)?;
            let total = g.sum(kept);
            g.scale(total, T::from_f64_lossy(1.0 / n_active as f64))
        }
        DfscReduction::AllLocations => g.mean(reached),
    };
    let margin_node = g.constant(NdArray::scalar(m));
    let raw = g.sub(margin_node, mean_reached)?;
    // Rounding can leave the value an ulp outside [0, m]; a constant shift
    // clamps it without touching the gradient.
    let v = g.value(raw).data()[0];
    let shift = g.constant(NdArray::scalar(v.max(T::zero()).min(m) - v));
    let loss = g.add(raw, shift)?;
    Ok(DfscOutput {
        loss,
        active_locations: n_active,
        no_active_locations: n_active == 0,
    })
}

/// Feature maps produced by the three networks for one image.
#[derive(Clone, Copy, Debug)]
pub struct TripletOutputs {
    pub teacher: Var,
    pub student_t: Var,
    pub student_a: Var,
    pub autoencoder: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct TotalLoss {
    pub total: Var,
    pub bundle: LossBundle,
    pub dfsc_inactive: bool,
}

fn scalar_of<T: Element>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).data()[0].to_f64().unwrap_or(f64::NAN)
}

/// `d_sa + d_ta + d_ts_masked + alpha * l_dfsc`.
pub fn total_loss<T: Element>(
    g: &mut Graph<T>,
    out: &TripletOutputs,
    weights: &LossWeights,
) -> Result<TotalLoss> {
    let ae_for_student = if weights.sa_detach_autoencoder {
        g.detach(out.autoencoder)
    } else {
        out.autoencoder
    };
    let d_sa = msd(g, out.student_a, ae_for_student)?;
    let d_ta = msd(g, out.teacher, out.autoencoder)?;
    let d_ts = masked_ts_loss(g, out.teacher, out.student_t, weights.q_ts)?;

    let mut sum = g.add(d_sa, d_ta)?;
    sum = g.add(sum, d_ts)?;
    let (l_dfsc, dfsc_inactive) = if weights.dfsc {
        let o = dfsc_loss(
            g,
            out.teacher,
            out.autoencoder,
            weights.q_ta,
            weights.margin,
            weights.dfsc_reduction,
            weights.normalize_order,
        )?;
        let weighted = g.scale(o.loss, T::from_f64_lossy(weights.alpha));
        sum = g.add(sum, weighted)?;
        (scalar_of(g, o.loss), o.no_active_locations)
    } else {
        (0.0, false)
    };

    let bundle = LossBundle::from_terms(
        scalar_of(g, d_sa),
        scalar_of(g, d_ta),
        scalar_of(g, d_ts),
        l_dfsc,
        weights.alpha,
    );
    Ok(TotalLoss {
        total: sum,
        bundle,
        dfsc_inactive,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f64]) -> NdArray<f64> {
        NdArray::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn scalar(g: &Graph<f64>, v: Var) -> f64 {
        g.value(v).data()[0]
    }

    fn dfsc(t: &NdArray<f64>, a: &NdArray<f64>, q: f64, m: f64) -> f64 {
        let mut g = Graph::new();
        let tv = g.constant(t.clone());
        let av = g.leaf(a.clone(), true);
        let o = dfsc_loss(&mut g, tv, av, q, m, DfscReduction::ActiveMean, NormalizeOrder::default())
            .unwrap();
        scalar(&g, o.loss)
    }

    #[test]
    fn msd_cases() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(arr(&[1, 1, 2], &[1.0, 2.0]));
        let b = g.constant(NdArray::zeros(&[1, 1, 2]));
        let d = msd(&mut g, a, b).unwrap();
        assert_eq!(scalar(&g, d), 2.5);
        let same = msd(&mut g, a, a).unwrap();
        assert_eq!(scalar(&g, same), 0.0);
        let c = g.constant(NdArray::zeros(&[1, 2, 1]));
        assert!(msd(&mut g, a, c).is_err());
    }

    #[test]
    fn hard_mask_cases() {
        let d = arr(&[1, 1, 4], &[0.1, 0.5, 0.9, 1.3]);
        assert_eq!(hard_mask(&d, 0.75).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
        assert!(hard_mask(&d, 0.0).unwrap().data().iter().all(|&v| v == 1.0));
        let flat = NdArray::full(&[2, 3, 3], 0.7);
        assert!(hard_mask(&flat, 0.999).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn masked_ts_cases() {
        let mut g = Graph::<f64>::new();
        let t = g.constant(arr(&[1, 1, 4], &[0.0; 4]));
        let diffs = [0.1f64, 0.5, 0.9, 1.3].map(f64::sqrt);
        let s = g.leaf(arr(&[1, 1, 4], &diffs), true);
        let l = masked_ts_loss(&mut g, t, s, 0.75).unwrap();
        assert!((scalar(&g, l) - 1.3).abs() < 1e-12);
        let full = masked_ts_loss(&mut g, t, s, 0.0).unwrap();
        let plain = msd(&mut g, t, s).unwrap();
        assert!((scalar(&g, full) - scalar(&g, plain)).abs() < 1e-15);
        let zero = masked_ts_loss(&mut g, t, t, 0.999).unwrap();
        assert_eq!(scalar(&g, zero), 0.0);
    }

    #[test]
    fn dfsc_hand_cases() {
        let t = NdArray::from_fn(&[3, 2, 2], |i| (i as f64 * 0.37).sin());
        assert_eq!(dfsc(&t, &t, 0.999, 0.4), 0.4);
        assert_eq!(dfsc(&t, &t, 0.5, 1.7), 1.7);
        let a = NdArray::from_fn(&[3, 2, 2], |i| (i as f64 * 1.1).cos());
        assert_eq!(dfsc(&t, &a, 0.9, 0.0), 0.0);

        let t = arr(&[2, 1, 1], &[1.0, 0.0]);
        let a = arr(&[2, 1, 1], &[0.0, 1.0]);
        let got = dfsc(&t, &a, 0.999, 2.0);
        assert!((got - (2.0 - 2f64.sqrt())).abs() < 1e-12, "{got}");
    }

    #[test]
    fn dfsc_gradient_only_reaches_autoencoder() {
        let mut g = Graph::<f64>::new();
        let t = g.leaf(NdArray::from_fn(&[4, 3, 3], |i| (i as f64 * 0.7).sin()), true);
        let a = g.leaf(NdArray::from_fn(&[4, 3, 3], |i| (i as f64 * 0.3).cos()), true);
        let o = dfsc_loss(&mut g, t, a, 0.5, 1.5, DfscReduction::ActiveMean, NormalizeOrder::BeforeMask)
            .unwrap();
        let grads = g.backward(o.loss).unwrap();
        assert!(grads.get(t).is_none());
        assert!(grads.get(a).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn dfsc_all_locations_adds_inactive_offset() {
        let t = NdArray::from_fn(&[2, 3, 3], |i| (i as f64 * 0.9).sin());
        let a = NdArray::from_fn(&[2, 3, 3], |i| (i as f64 * 0.4).cos());
        let mut g = Graph::<f64>::new();
        let tv = g.constant(t);
        let av = g.leaf(a, true);
        let active = dfsc_loss(&mut g, tv, av, 0.999, 0.5, DfscReduction::ActiveMean, NormalizeOrder::BeforeMask)
            .unwrap();
        let all = dfsc_loss(&mut g, tv, av, 0.999, 0.5, DfscReduction::AllLocations, NormalizeOrder::BeforeMask)
            .unwrap();
        let n = active.active_locations as f64;
        let expect = (scalar(&g, active.loss) * n + 0.5 * (9.0 - n)) / 9.0;
        assert!((scalar(&g, all.loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn total_is_weighted_sum() {
        let b = LossBundle::from_terms(0.5, 0.25, 0.1, 0.3, 2.0);
        assert!((b.total - 1.45).abs() < 1e-12);
        assert_eq!(LossWeights::default().alpha, 2.0);
    }

    #[test]
    fn total_of_identical_maps_without_margin_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(NdArray::from_fn(&[3, 2, 2], |i| i as f64));
        let out = TripletOutputs {
            teacher: x,
            student_t: x,
            student_a: x,
            autoencoder: x,
        };
        let w = LossWeights {
            margin: 0.0,
            ..LossWeights::default()
        };
        let t = total_loss(&mut g, &out, &w).unwrap();
        assert_eq!(t.bundle, LossBundle::default());
        assert_eq!(scalar(&g, t.total), 0.0);
    }

    #[test]
    fn weights_validation() {
        let mut w = LossWeights::default();
        assert!(w.validate().is_ok());
        w.margin = 2.5;
        assert!(w.validate().is_err());
        w.margin = 2.0;
        w.q_ta = 1.01;
        assert!(w.validate().is_err());
    }
}
