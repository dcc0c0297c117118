//! Check suites run both by the focused integration tests and by the
//! acceptance report.

use logad::losses::{
    dfsc_loss, masked_ts_loss, msd, total_loss, DfscReduction, LossWeights, NormalizeOrder,
    TripletOutputs,
};
use logad::metrics::{aupro, roc_auc, spro, DefectAnnotation, LabeledScore, RegionImage};
use logad::nets::{autoencoder_forward, pdn_forward, ModelConfig, PdnConfig, StudentHeads, TripletModel};
use logad::numeric::{Graph, NdArray, Var};
use rand::Rng;

use super::{gradcheck, kink_distance, normal, probe_sum, rng, uniform, KINK_MARGIN};

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_CONFIGS: u64 = 20;

/// Worst relative gradient error per checked target over `GRAD_CONFIGS` configurations.
pub struct GradResult {
    pub name: &'static str,
    pub configs: u64,
    pub worst: f64,
}

fn dim(r: &mut impl Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

/// Normal values pushed at least `gap` away from `kink`.
fn away_from(r: &mut rand_chacha::ChaCha8Rng, shape: &[usize], kink: f64, gap: f64) -> NdArray<f64> {
    let mut x = normal(r, shape);
    for v in x.data_mut() {
        if (*v - kink).abs() < gap {
            *v = kink + gap.copysign(*v - kink) * 2.0;
        }
    }
    x
}

/// Draws `(inputs, extra)` until the graph built by `f(extra)` keeps clear of every kink.
fn redraw<E: Clone, F: Fn(&mut Graph<f64>, &[Var]) -> Var>(
    seed: u64,
    draw: impl Fn(&mut rand_chacha::ChaCha8Rng) -> (Vec<(NdArray<f64>, bool)>, E),
    f: impl Fn(E) -> F,
) -> (Vec<(NdArray<f64>, bool)>, E) {
    for attempt in 0..100 {
        let (inputs, extra) = draw(&mut rng(seed * 1000 + attempt));
        let values: Vec<NdArray<f64>> = inputs.iter().map(|(v, _)| v.clone()).collect();
        if kink_distance(&values, f(extra.clone())) > KINK_MARGIN {
            return (inputs, extra);
        }
    }
    panic!("no kink-free configuration found for seed {seed}");
}

fn check(name: &'static str, mut one: impl FnMut(u64) -> f64) -> GradResult {
    let worst = (0..GRAD_CONFIGS).map(|s| one(s)).fold(0.0, f64::max);
    GradResult {
        name,
        configs: GRAD_CONFIGS,
        worst,
    }
}

pub fn operator_gradients() -> Vec<GradResult> {
    let mut out = Vec::new();
    out.push(check("conv2d", |s| {
        let mut r = rng(100 + s);
        let (ci, co) = (dim(&mut r, 1, 4), dim(&mut r, 1, 4));
        let (h, w) = (dim(&mut r, 3, 8), dim(&mut r, 3, 8));
        let k = dim(&mut r, 1, 3);
        let stride = dim(&mut r, 1, 2);
        let pad = dim(&mut r, 0, 1);
        let inputs = [
            (normal(&mut r, &[ci, h, w]), true),
            (normal(&mut r, &[co, ci, k, k]), true),
            (normal(&mut r, &[co]), true),
        ];
        gradcheck(&inputs, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], stride, pad).unwrap();
            probe_sum(g, y, s)
        })
    }));
    out.push(check("avg_pool2d", |s| {
        let mut r = rng(200 + s);
        let k = dim(&mut r, 1, 3);
        let stride = dim(&mut r, 1, 2);
        let shape = [dim(&mut r, 1, 8), dim(&mut r, k, 8), dim(&mut r, k, 8)];
        gradcheck(&[(normal(&mut r, &shape), true)], |g, v| {
            let y = g.avg_pool2d(v[0], k, stride).unwrap();
            probe_sum(g, y, s)
        })
    }));
    out.push(check("relu", |s| {
        let mut r = rng(300 + s);
        let shape = [dim(&mut r, 1, 8), dim(&mut r, 1, 8), dim(&mut r, 1, 8)];
        gradcheck(&[(away_from(&mut r, &shape, 0.0, 1e-3), true)], |g, v| {
            let y = g.relu(v[0]);
            probe_sum(g, y, s)
        })
    }));
    out.push(check("instance_norm", |s| {
        let mut r = rng(400 + s);
        let c = dim(&mut r, 1, 8);
        let shape = [c, dim(&mut r, 2, 8), dim(&mut r, 2, 8)];
        let inputs = [
            (normal(&mut r, &shape), true),
            (normal(&mut r, &[c]), true),
            (normal(&mut r, &[c]), true),
        ];
        gradcheck(&inputs, |g, v| {
            let y = g.instance_norm(v[0], v[1], v[2], 1e-5).unwrap();
            probe_sum(g, y, s)
        })
    }));
    out.push(check("bilinear_resize", |s| {
        let mut r = rng(500 + s);
        let shape = [dim(&mut r, 1, 8), dim(&mut r, 1, 8), dim(&mut r, 1, 8)];
        let (ho, wo) = (dim(&mut r, 1, 8), dim(&mut r, 1, 8));
        gradcheck(&[(normal(&mut r, &shape), true)], |g, v| {
            let y = g.bilinear_resize(v[0], ho, wo).unwrap();
            probe_sum(g, y, s)
        })
    }));
    type Binary = fn(&mut Graph<f64>, Var, Var) -> logad::Result<Var>;
    let binaries: [(&'static str, Binary); 3] = [
        ("add", |g, a, b| g.add(a, b)),
        ("sub", |g, a, b| g.sub(a, b)),
        ("mul", |g, a, b| g.mul(a, b)),
    ];
    for (i, (name, op)) in binaries.into_iter().enumerate() {
        out.push(check(name, |s| {
            let mut r = rng(600 + 100 * i as u64 + s);
            let shape = [dim(&mut r, 1, 8), dim(&mut r, 1, 8), dim(&mut r, 1, 8)];
            let inputs = [(normal(&mut r, &shape), true), (normal(&mut r, &shape), true)];
            gradcheck(&inputs, |g, v| {
                let y = op(g, v[0], v[1]).unwrap();
                probe_sum(g, y, s)
            })
        }));
    }
    out.push(check("scale", |s| {
        let mut r = rng(1000 + s);
        let shape = [dim(&mut r, 1, 8), dim(&mut r, 1, 8), dim(&mut r, 1, 8)];
        let k: f64 = r.random_range(-3.0..3.0);
        gradcheck(&[(normal(&mut r, &shape), true)], |g, v| {
            let y = g.scale(v[0], k);
            probe_sum(g, y, s)
        })
    }));
    out.push(check("mul_const", |s| {
        let mut r = rng(1100 + s);
        let shape = [dim(&mut r, 1, 8), dim(&mut r, 1, 8), dim(&mut r, 1, 8)];
        let c = normal(&mut r, &shape);
        gradcheck(&[(normal(&mut r, &shape), true)], |g, v| {
            let y = g.mul_const(v[0], &c).unwrap();
            probe_sum(g, y, s)
        })
    }));
    out.push(check("square", |s| {
        let mut r = rng(1200 + s);
        let shape = [dim(&mut r, 1, 8), dim(&mut r, 1, 8), dim(&mut r, 1, 8)];
        gradcheck(&[(normal(&mut r, &shape), true)], |g, v| {
            let y = g.square(v[0]);
            probe_sum(g, y, s)
        })
    }));
    out.push(check("sum", |s| {
        let mut r = rng(1300 + s);
        let shape = [dim(&mut r, 1, 8), dim(&mut r, 1, 8), dim(&mut r, 1, 8)];
        gradcheck(&[(normal(&mut r, &shape), true)], |g, v| {
            let sq = g.square(v[0]);
            g.sum(sq)
        })
    }));
    out.push(check("mean", |s| {
        let mut r = rng(1400 + s);
        let shape = [dim(&mut r, 1, 8), dim(&mut r, 1, 8), dim(&mut r, 1, 8)];
        gradcheck(&[(normal(&mut r, &shape), true)], |g, v| {
            let sq = g.square(v[0]);
            g.mean(sq)
        })
    }));
    out.push(check("slice_channels", |s| {
        let mut r = rng(1500 + s);
        let c = dim(&mut r, 1, 8);
        let shape = [c, dim(&mut r, 1, 8), dim(&mut r, 1, 8)];
        let start = dim(&mut r, 0, c - 1);
        let len = dim(&mut r, 1, c - start);
        gradcheck(&[(normal(&mut r, &shape), true)], |g, v| {
            let y = g.slice_channels(v[0], start, len).unwrap();
            probe_sum(g, y, s)
        })
    }));
    out.push(check("channel_normalize", |s| {
        let mut r = rng(1600 + s);
        let shape = [dim(&mut r, 1, 8), dim(&mut r, 1, 8), dim(&mut r, 1, 8)];
        gradcheck(&[(away_from(&mut r, &shape, 0.0, 0.05), true)], |g, v| {
            let y = g.channel_normalize(v[0]).unwrap();
            probe_sum(g, y, s)
        })
    }));
    out.push(check("channel_norm", |s| {
        let mut r = rng(1700 + s);
        let shape = [dim(&mut r, 1, 8), dim(&mut r, 1, 8), dim(&mut r, 1, 8)];
        gradcheck(&[(away_from(&mut r, &shape, 0.0, 0.05), true)], |g, v| {
            let y = g.channel_norm(v[0]).unwrap();
            probe_sum(g, y, s)
        })
    }));
    out.push(check("hinge", |s| {
        let mut r = rng(1800 + s);
        let shape = [dim(&mut r, 1, 8), dim(&mut r, 1, 8), dim(&mut r, 1, 8)];
        let m: f64 = r.random_range(0.0..2.0);
        gradcheck(&[(away_from(&mut r, &shape, m, 1e-3), true)], |g, v| {
            let y = g.hinge(v[0], m);
            probe_sum(g, y, s)
        })
    }));
    out.push(check("clamp_max", |s| {
        let mut r = rng(1900 + s);
        let shape = [dim(&mut r, 1, 8), dim(&mut r, 1, 8), dim(&mut r, 1, 8)];
        let c: f64 = r.random_range(-1.0..1.0);
        gradcheck(&[(away_from(&mut r, &shape, c, 1e-3), true)], |g, v| {
            let y = g.clamp_max(v[0], c);
            probe_sum(g, y, s)
        })
    }));
    out
}

fn shape3(r: &mut rand_chacha::ChaCha8Rng) -> [usize; 3] {
    [dim(r, 1, 8), dim(r, 1, 8), dim(r, 1, 8)]
}

pub fn loss_gradients() -> Vec<GradResult> {
    let mut out = Vec::new();
    out.push(check("msd", |s| {
        let mut r = rng(2000 + s);
        let shape = shape3(&mut r);
        let inputs = [(normal(&mut r, &shape), true), (normal(&mut r, &shape), true)];
        gradcheck(&inputs, |g, v| msd(g, v[0], v[1]).unwrap())
    }));
    out.push(check("masked_ts_loss", |s| {
        let mut r = rng(2100 + s);
        let shape = shape3(&mut r);
        let q = [0.5, 0.9, 0.999][s as usize % 3];
        let inputs = [(normal(&mut r, &shape), false), (normal(&mut r, &shape), true)];
        gradcheck(&inputs, |g, v| masked_ts_loss(g, v[0], v[1], q).unwrap())
    }));
    let variants = [
        ("dfsc_loss", DfscReduction::ActiveMean, NormalizeOrder::BeforeMask),
        ("dfsc_loss[after_mask]", DfscReduction::ActiveMean, NormalizeOrder::AfterMask),
        ("dfsc_loss[all_locations]", DfscReduction::AllLocations, NormalizeOrder::BeforeMask),
    ];
    for (i, (name, reduction, order)) in variants.into_iter().enumerate() {
        out.push(check(name, |s| {
            let q = [0.5, 0.9, 0.999][s as usize % 3];
            let (inputs, m) = redraw(2200 + 100 * i as u64 + s, |r| {
                let shape = [dim(r, 2, 8), dim(r, 1, 8), dim(r, 1, 8)];
                let m: f64 = r.random_range(0.1..2.0);
                let inputs = vec![(normal(r, &shape), false), (normal(r, &shape), true)];
                (inputs, m)
            }, |m| move |g: &mut Graph<f64>, v: &[Var]| {
                dfsc_loss(g, v[0], v[1], q, m, reduction, order).unwrap().loss
            });
            gradcheck(&inputs, |g, v| dfsc_loss(g, v[0], v[1], q, m, reduction, order).unwrap().loss)
        }));
    }
    out.push(check("total_loss", |s| {
        let total = |w: LossWeights| {
            move |g: &mut Graph<f64>, v: &[Var]| {
                let outs = TripletOutputs {
                    teacher: v[0],
                    student_t: v[1],
                    student_a: v[2],
                    autoencoder: v[3],
                };
                total_loss(g, &outs, &w).unwrap().total
            }
        };
        let (inputs, weights) = redraw(
            2600 + s,
            |r| {
                let shape = [dim(r, 2, 8), dim(r, 1, 8), dim(r, 1, 8)];
                let weights = LossWeights {
                    alpha: r.random_range(0.5..3.0),
                    margin: r.random_range(0.1..2.0),
                    q_ts: 0.9,
                    q_ta: 0.9,
                    ..LossWeights::default()
                };
                let inputs = vec![
                    (normal(r, &shape), false),
                    (normal(r, &shape), true),
                    (normal(r, &shape), true),
                    (normal(r, &shape), true),
                ];
                (inputs, weights)
            },
            |w| total(w),
        );
        gradcheck(&inputs, total(weights))
    }));
    out
}

/// Whole-network checks on tiny configurations.
pub fn network_gradients() -> Vec<GradResult> {
    let cfg = |seed: u64, instance_norm: bool| ModelConfig {
        pdn: PdnConfig {
            in_channels: 3,
            out_channels: 2,
            widths: [2, 3, 3],
        },
        ae_width: 2,
        image_size: 8,
        instance_norm,
        student_heads: StudentHeads::Shared,
        seed,
    };
    // Draws parameters and input for attempt `k`, skipping draws near a kink.
    fn smooth_draw(
        store: &logad::nets::ParamStore,
        input_shape: &[usize],
        seed: u64,
        f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
    ) -> Vec<(NdArray<f64>, bool)> {
        for attempt in 0..100 {
            let mut r = rng(seed * 1000 + attempt);
            let mut inputs: Vec<(NdArray<f64>, bool)> = store
                .arrays()
                .map(|a| {
                    let mut p = a.cast::<f64>();
                    for v in p.data_mut() {
                        *v += 0.1 * r.sample::<f64, _>(rand_distr::StandardNormal);
                    }
                    (p, true)
                })
                .collect();
            inputs.push((uniform(&mut r, input_shape, -1.0, 1.0), true));
            let values: Vec<NdArray<f64>> = inputs.iter().map(|(v, _)| v.clone()).collect();
            if kink_distance(&values, f) > KINK_MARGIN {
                return inputs;
            }
        }
        panic!("no kink-free configuration found for seed {seed}");
    }
    let mut out = Vec::new();
    out.push(check("pdn_forward", |s| {
        let model = TripletModel::new(cfg(s, true)).unwrap();
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let (p, x) = v.split_at(v.len() - 1);
            let y = pdn_forward(g, p, x[0]).unwrap();
            probe_sum(g, y, s)
        };
        gradcheck(&smooth_draw(&model.teacher, &[3, 12, 12], 2700 + s, &f), f)
    }));
    for (name, norm) in [("autoencoder_forward", true), ("autoencoder_forward[no_norm]", false)] {
        out.push(check(name, |s| {
            let c = cfg(s, norm);
            let model = TripletModel::new(c.clone()).unwrap();
            let f = |g: &mut Graph<f64>, v: &[Var]| {
                let (p, x) = v.split_at(v.len() - 1);
                let y = autoencoder_forward(g, &c, p, x[0]).unwrap();
                probe_sum(g, y, s)
            };
            gradcheck(&smooth_draw(&model.autoencoder, &[3, 8, 8], 2800 + s, &f), f)
        }));
    }
    out
}

/// Gradient descent on `A` alone with the mask recomputed every step,
/// starting from `A = T + start_noise * N(0, 1)`.
/// Returns `(initial loss, final loss, steps taken)`; stops once below `0.01 m`.
pub fn dfsc_descent(
    seed: u64,
    order: NormalizeOrder,
    m: f64,
    start_noise: f64,
    lr: f64,
    max_steps: usize,
) -> (f64, f64, usize) {
    let mut r = rng(seed);
    let t = normal(&mut r, &[8, 4, 4]);
    let noise = normal(&mut r, &[8, 4, 4]);
    let mut a = NdArray::from_fn(&[8, 4, 4], |i| t.data()[i] + start_noise * noise.data()[i]);
    let q = LossWeights::default().q_ta;
    let mut initial = f64::NAN;
    for step in 0..=max_steps {
        let mut g = Graph::new();
        let tv = g.constant(t.clone());
        let av = g.leaf(a.clone(), true);
        let out = dfsc_loss(&mut g, tv, av, q, m, DfscReduction::ActiveMean, order).unwrap();
        let loss = g.value(out.loss).data()[0];
        if step == 0 {
            initial = loss;
        }
        if loss < 0.01 * m || step == max_steps {
            return (initial, loss, step);
        }
        let grads = g.backward(out.loss).unwrap();
        if let Some(d) = grads.get(av) {
            for (v, gv) in a.data_mut().iter_mut().zip(d.data()) {
                *v -= lr * gv;
            }
        }
    }
    unreachable!()
}

/// Selected-element counts of `hard_mask(q = 0.999)` on `n` i.i.d. uniform values, per seed.
pub fn mask_counts(n: usize, seeds: u64) -> Vec<usize> {
    (0..seeds)
        .map(|s| {
            let x = uniform(&mut rng(5000 + s), &[1, 1, n], 0.0, 1.0);
            let m = logad::losses::hard_mask(&x, 0.999).unwrap();
            m.data().iter().filter(|&&v| v > 0.0).count()
        })
        .collect()
}

/// `P(anomalous > normal) + P(tie) / 2` by counting every pair.
pub fn mann_whitney_auc(scores: &[LabeledScore]) -> f64 {
    let (mut twice, mut pos, mut neg) = (0u128, 0u128, 0u128);
    for a in scores.iter().filter(|s| s.anomalous) {
        pos += 1;
        for n in scores.iter().filter(|s| !s.anomalous) {
            twice += match a.score.partial_cmp(&n.score).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    for _ in scores.iter().filter(|s| !s.anomalous) {
        neg += 1;
    }
    twice as f64 / (2 * pos * neg) as f64
}

/// Random labeled scores drawn from `levels` distinct values (ties are common).
pub fn random_labeled(seed: u64, n: usize, levels: u32) -> Vec<LabeledScore> {
    let mut r = rng(seed);
    let mut out: Vec<LabeledScore> = (0..n)
        .map(|_| LabeledScore::new(r.random_range(0..levels) as f64 / levels as f64, r.random_bool(0.4)))
        .collect();
    out[0].anomalous = true;
    out[n - 1].anomalous = false;
    out
}

/// One image: map plus defect regions.
pub type PixImage = (Vec<f64>, Vec<DefectAnnotation>);

/// Random images of at most 16 x 16 with rectangular, possibly overlapping regions.
pub fn random_region_images(seed: u64, saturate_below_area: bool) -> Vec<PixImage> {
    let mut r = rng(seed);
    let n_images = r.random_range(1..=4);
    let (h, w) = (r.random_range(2..=16usize), r.random_range(2..=16usize));
    let levels = [3u32, 10, 1000][r.random_range(0..3usize)];
    let mut out = Vec::new();
    for i in 0..n_images {
        let map: Vec<f64> = (0..h * w).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
        let n_regions = if i == 0 { r.random_range(1..=3) } else { r.random_range(0..=3) };
        let mut regions = Vec::new();
        for _ in 0..n_regions {
            let (y0, x0) = (r.random_range(0..h), r.random_range(0..w));
            let (y1, x1) = (r.random_range(y0..h), r.random_range(x0..w));
            let mask: Vec<bool> = (0..h * w)
                .map(|p| (y0..=y1).contains(&(p / w)) && (x0..=x1).contains(&(p % w)))
                .collect();
            let area = mask.iter().filter(|&&m| m).count() as f64;
            let saturation_area = if saturate_below_area { r.random_range(1.0..=area) } else { area };
            regions.push(DefectAnnotation { mask, saturation_area });
        }
        out.push((map, regions));
    }
    // The false positive rate needs at least one defect-free pixel.
    let (map, regions) = &mut out[0];
    let free = (0..map.len()).any(|p| regions.iter().all(|reg| !reg.mask[p]));
    if !free {
        regions.truncate(1);
        regions[0].mask[0] = false;
        let area = regions[0].area() as f64;
        regions[0].saturation_area = regions[0].saturation_area.min(area);
        if regions[0].area() == 0 {
            regions[0].mask[1] = true;
            regions[0].saturation_area = 1.0;
        }
    }
    out
}

/// Exhaustive sweep: every distinct score is a threshold, every statistic
/// is recounted from scratch, and the curve is integrated with trapezoids.
pub fn sweep_oracle(images: &[PixImage], saturate: bool, limit: f64) -> f64 {
    let mut thresholds: Vec<f64> = images.iter().flat_map(|(m, _)| m.iter().copied()).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let negatives: usize = images
        .iter()
        .map(|(m, regs)| (0..m.len()).filter(|&p| regs.iter().all(|r| !r.mask[p])).count())
        .sum();
    let n_regions: usize = images.iter().map(|(_, r)| r.len()).sum();
    let mut curve = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let mut fp = 0usize;
        let mut overlap = 0.0;
        for (map, regs) in images {
            fp += (0..map.len()).filter(|&p| map[p] >= t && regs.iter().all(|r| !r.mask[p])).count();
            for reg in regs {
                let hit = (0..map.len()).filter(|&p| reg.mask[p] && map[p] >= t).count() as f64;
                let cap = if saturate { reg.saturation_area } else { reg.area() as f64 };
                overlap += (hit / cap).min(1.0);
            }
        }
        curve.push((fp as f64 / negatives as f64, overlap / n_regions as f64));
    }
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
    }
    area / limit
}

pub fn region_views(images: &[PixImage]) -> Vec<RegionImage<'_>> {
    images.iter().map(|(m, r)| RegionImage { map: m, regions: r }).collect()
}

/// Largest deviation of aupro and spro from the sweep oracle over `cases` random problems.
pub fn pro_oracle_gap(cases: u64) -> f64 {
    let mut worst = 0.0f64;
    for s in 0..cases {
        let imgs = random_region_images(9000 + s, s % 2 == 0);
        let views = region_views(&imgs);
        for limit in [0.05, 0.3, 1.0, 0.0173] {
            worst = worst.max((aupro(&views, limit).unwrap() - sweep_oracle(&imgs, false, limit)).abs());
            worst = worst.max((spro(&views, limit).unwrap() - sweep_oracle(&imgs, true, limit)).abs());
        }
    }
    worst
}

/// Cases where `roc_auc` differs from the pair count, over sizes 2..=200.
pub fn roc_oracle_mismatches(cases: u64) -> usize {
    (0..cases)
        .filter(|&s| {
            let n = 2 + (s as usize * 37) % 199;
            let scores = random_labeled(7000 + s, n, [2, 5, 50, 100_000][s as usize % 4]);
            roc_auc(&scores).unwrap() != mann_whitney_auc(&scores)
        })
        .count()
}

/// Normalized values outside `(0, 1)` over raw inputs spanning many decades,
/// including exact zeros and values far beyond the calibration quantiles.
pub fn open_interval_violations(seeds: u64) -> usize {
    use logad::scorer::{normalize_map, BranchStats, Branch, Projection, ScoreMap};
    let mut bad = 0;
    for s in 0..seeds {
        let mut r = rng(12_000 + s);
        let pool: Vec<f64> = (0..2000).map(|_| r.random::<f64>().powi(3) * 10.0).collect();
        let stats = BranchStats::fit(pool).unwrap();
        let mut raw: Vec<f64> = (0..10_000).map(|_| 10f64.powf(r.random_range(-12.0..12.0))).collect();
        raw.extend([0.0, f64::MIN_POSITIVE, 1e300, f64::MAX]);
        let n = raw.len();
        let m = normalize_map(&ScoreMap::new(1, n, raw).unwrap(), &stats, Projection::Sigmoid, Branch::Global);
        bad += m.values.iter().filter(|&&v| !(v > 0.0 && v < 1.0)).count();
    }
    bad
}

/// Adjacent pairs of sorted distinct raw values whose normalized values fail
/// to increase strictly. Raw values are drawn over five calibration spans on
/// either side of the quantile window.
pub fn monotonicity_violations(seed: u64, n: usize) -> usize {
    use logad::scorer::{project, BranchStats, Projection};
    let mut r = rng(13_000 + seed);
    let pool: Vec<f64> = (0..5000).map(|_| r.random::<f64>().powi(2)).collect();
    let stats = BranchStats::fit(pool).unwrap();
    let span = stats.q_high - stats.q_low;
    let mut raw: Vec<f64> = (0..n)
        .map(|_| r.random_range(stats.q_low - 5.0 * span..stats.q_high + 5.0 * span))
        .collect();
    raw.sort_by(f64::total_cmp);
    raw.dedup();
    let mut bad = 0;
    for projection in [Projection::Sigmoid, Projection::Linear] {
        let v: Vec<f64> = raw.iter().map(|&x| project(x, &stats, projection)).collect();
        bad += v.windows(2).filter(|w| !(w[1] > w[0])).count();
    }
    bad
}
