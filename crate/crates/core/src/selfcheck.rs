//! Built-in oracle suite run by `fogstat selfcheck`.
//!
//! Each check is timed and reported independently; a failing check never
//! stops the ones after it.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataio::{split_by_event, DatasetManifest, FogEvent, Frame, Split};
use crate::dbsfnet::{check_network_gradients, DbSfNet, MaskImage, ModelConfig};
use crate::error::Result;
use crate::kem::{
    cooccurrence, cooccurrence_counts, features_from_cooc, kem_transform_with_threads, KemConfig,
    QuantizedPatch, CORRELATION_VARIANCE_GUARD, NUM_FEATURES, OFFSETS,
};
use crate::metrics::{metrics_from_confusion, ConfusionCounts};
use crate::ndtensor::gradcheck::{check_layer, random_tensor, GradReport};
use crate::ndtensor::{
    conv2d_backward, conv2d_forward, dense, dense_backward, gap, gap_backward, maxpool2d,
    maxpool2d_backward, relu, relu_backward, scale_channels, scale_channels_backward, sigmoid,
    sigmoid_backward, softmax_channels, softmax_channels_backward, upsample_deconv,
    upsample_deconv_backward, Activation, LayerGrad, Padding, Tensor,
};

/// Signature of [`conv2d_backward`]; swappable so the gradient check can be
/// shown to catch a broken implementation.
pub type ConvBackward = fn(&Tensor, &Tensor, usize, Padding, &Tensor) -> Result<LayerGrad>;

#[derive(Clone, Debug)]
pub struct SelfCheckOptions {
    /// Seeds per gradient check.
    pub seeds: u64,
    pub glcm_patches: usize,
    pub conv_backward: ConvBackward,
}

impl Default for SelfCheckOptions {
    fn default() -> Self {
        SelfCheckOptions {
            seeds: 5,
            glcm_patches: 200,
            conv_backward: conv2d_backward,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub seconds: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct SelfCheckReport {
    pub checks: Vec<CheckResult>,
}

impl SelfCheckReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

type Outcome = Result<(bool, String)>;

fn timed(name: &str, f: impl FnOnce() -> Outcome) -> CheckResult {
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult {
        name: name.into(),
        passed,
        seconds: t.elapsed().as_secs_f64(),
        detail,
    }
}

pub fn run_selfcheck(opts: &SelfCheckOptions) -> SelfCheckReport {
    let checks = vec![
        timed("glcm-oracle", || glcm_oracle(opts.glcm_patches)),
        timed("kem-thread-determinism", kem_threads),
        timed("layer-gradients", || {
            layer_gradients(opts.seeds, opts.conv_backward)
        }),
        timed("network-gradients", || network_gradients(opts.seeds)),
        timed("metric-hand-check", metric_hand_check),
        timed("manifest-disjointness", manifest_disjointness),
    ];
    SelfCheckReport { checks }
}

/// Straight-line per-level statistics, averaged over levels.
fn oracle_features(levels: &[(usize, Vec<f64>)]) -> [f64; NUM_FEATURES] {
    let mut acc = [0.0; NUM_FEATURES];
    for (g, q) in levels {
        let g = *g;
        let at = |m: usize, n: usize| q[m * g + n];
        let mut mu = 0.0;
        for m in 0..g {
            for n in 0..g {
                mu += m as f64 * at(m, n);
            }
        }
        let mut f = [0.0; NUM_FEATURES];
        f[0] = mu;
        let mut cov = 0.0;
        for m in 0..g {
            for n in 0..g {
                let p = at(m, n);
                let (mf, nf) = (m as f64, n as f64);
                f[1] += p * (mf - mu).powi(2);
                f[2] += p / (1.0 + (mf - nf).powi(2));
                f[3] += p * (mf - nf).powi(2);
                f[4] += p * (mf - nf).abs();
                if p > 0.0 {
                    f[5] -= p * p.ln();
                }
                f[6] += p * p;
                cov += p * (mf - mu) * (nf - mu);
            }
        }
        f[7] = if f[1] < CORRELATION_VARIANCE_GUARD {
            1.0
        } else {
            cov / f[1]
        };
        for (a, v) in acc.iter_mut().zip(f) {
            *a += v;
        }
    }
    acc.map(|v| v / levels.len() as f64)
}

fn glcm_oracle(patches: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x61c3);
    let mut worst = 0.0f64;
    for k in 0..patches {
        let side = [3usize, 5, 7][rng.gen_range(0..3)];
        let raw: Vec<u8> = (0..side * side).map(|_| rng.gen()).collect();
        let mut levels = Vec::new();
        let mut mats = Vec::new();
        for alpha in [2u8, 3, 4] {
            let g = 1usize << alpha;
            let values: Vec<u8> = raw.iter().map(|&v| (v as usize * g / 256) as u8).collect();
            let qp = QuantizedPatch {
                alpha,
                side,
                values: values.clone(),
            };
            let counts = cooccurrence_counts(&qp);
            for (d, &(dr, dc)) in OFFSETS.iter().enumerate() {
                let mut brute = vec![0u32; g * g];
                for a in 0..side * side {
                    for b in 0..side * side {
                        let (ar, ac) = ((a / side) as isize, (a % side) as isize);
                        let (br, bc) = ((b / side) as isize, (b % side) as isize);
                        if (br - ar, bc - ac) == (dr, dc) || (ar - br, ac - bc) == (dr, dc) {
                            brute[values[a] as usize * g + values[b] as usize] += 1;
                        }
                    }
                }
                if brute != counts.counts[d] {
                    return Ok((
                        false,
                        format!("patch {k}: counts differ at level {alpha}, direction {d}"),
                    ));
                }
                let total: u32 = brute.iter().sum();
                if total == 0 {
                    return Ok((false, format!("patch {k}: no pairs")));
                }
            }
            let totals: Vec<f64> = (0..4).map(|d| counts.direction_total(d) as f64).collect();
            let q: Vec<f64> = (0..g * g)
                .map(|i| {
                    (0..4)
                        .map(|d| counts.counts[d][i] as f64 / totals[d])
                        .sum::<f64>()
                        / 4.0
                })
                .collect();
            levels.push((g, q));
            mats.push(cooccurrence(&qp));
        }
        let got = features_from_cooc(&mats);
        let want = oracle_features(&levels);
        for (a, b) in got.iter().zip(want) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok((
        worst <= 1e-12,
        format!("{patches} patches, max feature deviation {worst:.2e}"),
    ))
}

fn kem_threads() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e4d);
    let img = Tensor::from_vec(
        &[3, 48, 48],
        (0..3 * 48 * 48)
            .map(|_| rng.gen_range(0.0..255.0))
            .collect(),
    )?;
    let cfg = KemConfig::default();
    let one = kem_transform_with_threads(&img, &cfg, 1)?;
    let many = kem_transform_with_threads(&img, &cfg, 4)?;
    let same = one
        .tensor()
        .data()
        .iter()
        .zip(many.tensor().data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    Ok((same, "1 vs 4 threads on 48×48".into()))
}

fn merge(into: &mut GradReport, r: &GradReport) {
    into.checked += r.checked;
    into.max_rel_error = into.max_rel_error.max(r.max_rel_error);
}

fn layer_gradients(seeds: u64, conv_bwd: ConvBackward) -> Outcome {
    let mut failures = Vec::new();
    let mut total = GradReport::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9a0 + seed);
        let mut run = |name: &str, r: GradReport| {
            if !r.passed() {
                failures.push(format!("{name} (seed {seed}, rel {:.2e})", r.max_rel_error));
            }
            merge(&mut total, &r);
        };

        for (stride, padding) in [(1, Padding::SameZero), (2, Padding::Valid)] {
            let args = [
                random_tensor(&[2, 6, 6], &mut rng),
                random_tensor(&[3, 2, 3, 3], &mut rng),
                random_tensor(&[3], &mut rng),
            ];
            let r = check_layer(
                &args,
                |a| {
                    conv2d_forward(&a[0], &a[1], a[2].data(), stride, padding)
                        .expect("valid shapes")
                },
                |a, up| {
                    conv_bwd(&a[0], &a[1], stride, padding, up)
                        .expect("valid shapes")
                        .into_input_weight_bias()
                },
                &mut rng,
            );
            run("conv2d", r);
        }

        let args = [
            random_tensor(&[3, 3, 3], &mut rng),
            random_tensor(&[3, 2, 2, 2], &mut rng),
            random_tensor(&[2], &mut rng),
        ];
        let r = check_layer(
            &args,
            |a| upsample_deconv(&a[0], &a[1], a[2].data(), 2).expect("valid shapes"),
            |a, up| {
                upsample_deconv_backward(&a[0], &a[1], 2, up)
                    .expect("valid shapes")
                    .into_input_weight_bias()
            },
            &mut rng,
        );
        run("deconv", r);

        // distinct values keep the argmax away from ties
        let mut x = random_tensor(&[2, 4, 4], &mut rng);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v += i as f64 * 0.01;
        }
        let r = check_layer(
            &[x],
            |a| maxpool2d(&a[0], 2).expect("valid shapes").0,
            |a, up| {
                vec![
                    maxpool2d_backward(&maxpool2d(&a[0], 2).expect("valid shapes").1, up)
                        .expect("valid shapes"),
                ]
            },
            &mut rng,
        );
        run("maxpool", r);

        let x = random_tensor(&[2, 3, 3], &mut rng);
        run(
            "relu",
            check_layer(
                std::slice::from_ref(&x),
                |a| relu(&a[0]),
                |a, up| vec![relu_backward(&a[0], up).expect("same shape")],
                &mut rng,
            ),
        );
        run(
            "sigmoid",
            check_layer(
                std::slice::from_ref(&x),
                |a| sigmoid(&a[0]),
                |a, up| vec![sigmoid_backward(&sigmoid(&a[0]), up).expect("same shape")],
                &mut rng,
            ),
        );
        run(
            "softmax",
            check_layer(
                std::slice::from_ref(&x),
                |a| softmax_channels(&a[0]).expect("rank 3"),
                |a, up| {
                    vec![
                        softmax_channels_backward(&softmax_channels(&a[0]).expect("rank 3"), up)
                            .expect("same shape"),
                    ]
                },
                &mut rng,
            ),
        );
        run(
            "gap",
            check_layer(
                std::slice::from_ref(&x),
                |a| Tensor::from_vec(&[2], gap(&a[0]).expect("rank 3")).expect("two channels"),
                |a, up| vec![gap_backward(a[0].shape(), up.data()).expect("matching channels")],
                &mut rng,
            ),
        );
        let gates = random_tensor(&[2], &mut rng);
        run(
            "scale-channels",
            check_layer(
                &[x, gates],
                |a| scale_channels(&a[0], a[1].data()).expect("matching channels"),
                |a, up| {
                    let (dx, dg) =
                        scale_channels_backward(&a[0], a[1].data(), up).expect("same shape");
                    vec![dx, Tensor::from_vec(&[dg.len()], dg).expect("one per gate")]
                },
                &mut rng,
            ),
        );
        for act in [Activation::None, Activation::Relu, Activation::Sigmoid] {
            let args = [
                random_tensor(&[4], &mut rng),
                random_tensor(&[3, 4], &mut rng),
                random_tensor(&[3], &mut rng),
            ];
            let fwd =
                |a: &[Tensor]| dense(a[0].data(), &a[1], a[2].data(), act).expect("valid shapes");
            let r = check_layer(
                &args,
                |a| Tensor::from_vec(&[3], fwd(a)).expect("three outputs"),
                |a, up| {
                    dense_backward(a[0].data(), &a[1], &fwd(a), act, up.data())
                        .expect("valid shapes")
                        .into_input_weight_bias()
                },
                &mut rng,
            );
            run("dense", r);
        }
    }
    let detail = format!(
        "{} entries over {seeds} seeds, max rel {:.2e}",
        total.checked, total.max_rel_error
    );
    if failures.is_empty() {
        Ok((true, detail))
    } else {
        Ok((false, format!("{detail}; failed: {}", failures.join(", "))))
    }
}

fn network_gradients(seeds: u64) -> Outcome {
    let cfg = ModelConfig {
        input_size: 16,
        ..ModelConfig::default()
    };
    let mut total = GradReport::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(0x4e7 + seed);
        let net = DbSfNet::new(cfg.clone(), seed)?;
        let img = random_tensor(&[3, 16, 16], &mut rng).map(|v| 127.5 * (v + 1.0));
        let feats = crate::kem::kem_transform(&img, &KemConfig::default())?;
        let mask = MaskImage::new(16, 16, (0..256).map(|_| rng.gen_range(0..2u8)).collect())?;
        let r = check_network_gradients(&net, &img, &feats, &mask, 3, &mut rng)?;
        merge(&mut total, &r);
    }
    Ok((
        total.passed(),
        format!(
            "{} entries over {seeds} seeds, max rel {:.2e}",
            total.checked, total.max_rel_error
        ),
    ))
}

fn metric_hand_check() -> Outcome {
    let r = metrics_from_confusion(ConfusionCounts {
        tp: 50,
        fp: 10,
        fn_: 20,
        tn: 920,
    });
    let expected = [
        (r.csi, 0.625),
        (r.f1, 0.7692),
        (r.miou, 0.7967),
        (r.precision, 0.8333),
        (r.recall, 0.7143),
    ];
    let worked = expected
        .iter()
        .all(|(got, want)| (got - want).abs() <= 1e-4);
    let mut rng = ChaCha8Rng::seed_from_u64(0x3e7);
    let identity = (0..1000).all(|_| {
        let c = ConfusionCounts {
            tp: rng.gen_range(0..1000),
            fp: rng.gen_range(0..1000),
            fn_: rng.gen_range(0..1000),
            tn: rng.gen_range(0..1000),
        };
        let m = metrics_from_confusion(c);
        m.miou == (m.csi + m.back_iou) / 2.0
    });
    let perfect = metrics_from_confusion(ConfusionCounts {
        tp: 5,
        fp: 0,
        fn_: 0,
        tn: 7,
    });
    let perfect_ok = perfect.kappa == 1.0 && perfect.miou == 1.0;
    Ok((
        worked && identity && perfect_ok,
        format!("worked example {worked}, miou identity {identity}, perfect {perfect_ok}"),
    ))
}

fn manifest_disjointness() -> Outcome {
    let events: Vec<FogEvent> = (0..30)
        .map(|i| FogEvent {
            event_id: format!("e{i}"),
            frames: (0..3)
                .map(|f| Frame {
                    image: format!("i{i}_{f}.ppm").into(),
                    mask: format!("m{i}_{f}.pgm").into(),
                })
                .collect(),
        })
        .collect();
    let m = split_by_event(events, [0.6, 0.2, 0.2], 11, 64)?;
    let mut seen = std::collections::BTreeSet::new();
    let disjoint = m
        .splits
        .values()
        .flatten()
        .all(|e| seen.insert(e.event_id.clone()));
    let mut leak: DatasetManifest = m.clone();
    let moved = leak.splits[&Split::Train][0].clone();
    leak.splits
        .get_mut(&Split::Test)
        .expect("test split")
        .push(moved);
    let rejected = leak.validate().is_err();
    Ok((
        disjoint && rejected,
        format!(
            "{} events split disjointly {disjoint}, leaked manifest rejected {rejected}",
            seen.len()
        ),
    ))
}
