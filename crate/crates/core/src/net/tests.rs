use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::grid::FeatureGrid;

fn random_grid(rng: &mut ChaCha8Rng, cfg: &SppNetConfig, fill: f64) -> FeatureGrid {
    let mut g = FeatureGrid::empty(cfg.d1, cfg.d2, cfg.input_channels);
    for cell in 0..g.cells() {
        if rng.random::<f64>() < fill {
            g.occupancy[cell] = true;
            for v in &mut g.data[cell * g.channels..(cell + 1) * g.channels] {
                *v = rng.random_range(-1.0..1.0);
            }
        }
    }
    g
}

fn tiny_config() -> SppNetConfig {
    SppNetConfig {
        width_multiplier: 0.01,
        ..SppNetConfig::new(4, 4, 6)
    }
}

#[test]
fn reference_layer_counts() {
    let cfg = SppNetConfig::default();
    let rows = layer_counts(&cfg);
    let by_name = |n: &str| rows.iter().find(|r| r.name == n).unwrap().clone();
    // weights plus biases of each conv layer
    let conv = |n: &str| {
        let r = by_name(n);
        r.weights + r.biases
    };
    assert_eq!(conv("conv0/1"), 17_152);
    assert_eq!(conv("conv0/2"), 33_024);
    assert_eq!(conv("conv0/3"), 65_792);
    assert_eq!(conv("conv0/4"), 131_328 + 256);
    assert_eq!(conv("conv1/2"), 16_512);
    assert_eq!(conv("conv2/2"), 8_256);
    assert_eq!(conv("conv2/3"), 4_160);
    assert_eq!(conv("conv2/4"), 2_080);
    let heads = by_name("fc8_t").weights
        + by_name("fc8_t").biases
        + by_name("fc8_q").weights
        + by_name("fc8_q").biases;
    assert_eq!(heads, 82_000);

    let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let total: usize = rows.iter().map(LayerCount::total).sum();
    assert_eq!(p.parameter_count(), total);
    assert!((total as f64 / 3.0e6 - 1.0).abs() <= 0.05, "{total}");
    assert_eq!(p.running.len(), 2 * (1152 + 512 + 288));
}

#[test]
fn quarter_width_has_quarter_parameters() {
    let base = init_params(&SppNetConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let cfg = SppNetConfig {
        width_multiplier: 0.25,
        ..Default::default()
    };
    let quarter = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let ratio = quarter.parameter_count() as f64 / base.parameter_count() as f64;
    assert!((ratio - 0.25).abs() <= 0.025, "{ratio}");
}

#[test]
fn default_pooling_shapes() {
    let cfg = SppNetConfig::default();
    assert_eq!(cfg.pooled_len(), 1536);
    let shapes: Vec<(usize, usize)> = (0..3)
        .map(|s| (SppNetConfig::regions_per_side(s), cfg.branch_output(s)))
        .collect();
    assert_eq!(shapes, vec![(1, 512), (2, 128), (4, 32)]);
    assert_eq!(cfg.level_offset(1), 512);
    assert_eq!(cfg.level_offset(2), 1024);
}

#[test]
fn flop_count_is_near_reference() {
    let flops = forward_flops(&SppNetConfig::default()) as f64;
    assert!((flops / 346.3e6 - 1.0).abs() < 0.05, "{flops}");
}

#[test]
fn init_is_seeded() {
    let cfg = tiny_config();
    let a = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a.values, b.values);
    assert_eq!(
        a.tensor("conv0/1.bn_gain").unwrap(),
        vec![1.0; cfg.branch_widths(0)[0]].as_slice()
    );
    assert_eq!(a.log_sigma_q_sq(), 0.0);
    let w = a.tensor("fc7.weight").unwrap();
    let limit = (6.0 / (2 * cfg.fc_width()) as f64).sqrt();
    assert!(w.iter().all(|v| v.abs() <= limit));
}

#[test]
fn zero_grid_eval_is_finite() {
    let cfg = SppNetConfig::default();
    let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let g = FeatureGrid::empty(32, 32, 133);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (t, q, trace) = forward(&p, &g, Mode::Eval, &mut rng).unwrap();
    assert!(t.iter().all(|v| v.is_finite()));
    assert!(q.to_array().iter().all(|v| v.is_finite()));
    assert_eq!(trace.pooled_features(0).len(), 1536);
    assert_eq!(contribution_counts(&trace, 0).iter().sum::<u32>(), 1536);

    let mut one = g.clone();
    one.data[..128].iter_mut().for_each(|v| *v = 0.3);
    let (t1, q1, _) = forward(&p, &one, Mode::Eval, &mut rng).unwrap();
    assert!(t1 != t || q1 != q);
}

#[test]
fn shape_mismatch() {
    let cfg = tiny_config();
    let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let g = FeatureGrid::empty(4, 4, 7);
    let r = forward(&p, &g, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(r, Err(crate::Error::ShapeError(_))));
}

#[test]
fn positive_single_cell_wins_its_regions() {
    let cfg = SppNetConfig::default();
    let mut p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    for branch in &p.layout.convs.clone() {
        for c in branch {
            p.values[c.weight.clone()]
                .iter_mut()
                .for_each(|v| *v = v.abs());
        }
    }
    let mut g = FeatureGrid::empty(32, 32, 133);
    let cell = 5 * 32 + 7;
    g.data[cell * 133..(cell + 1) * 133]
        .iter_mut()
        .for_each(|v| *v = 0.5);
    let (_, _, trace) = forward(&p, &g, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let counts = positive_contribution_counts(&trace, 0);
    // the cell wins every unit whose pooling region contains it
    assert_eq!(counts[cell], 512 + 128 + 32);
    assert_eq!(counts.iter().sum::<u32>(), 512 + 128 + 32);
    let raw = contribution_counts(&trace, 0);
    assert_eq!(raw[cell], counts[cell]);
    assert_eq!(raw.iter().sum::<u32>(), 1536);
}

#[test]
fn doubling_a_cell_only_moves_its_channels() {
    let cfg = tiny_config();
    let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = random_grid(&mut rng, &cfg, 0.6);
    let cell = g.occupancy.iter().position(|o| *o).unwrap();
    let mut h = g.clone();
    h.data[cell * 6..cell * 6 + 1]
        .iter_mut()
        .for_each(|v| *v *= 2.0);
    let (_, _, a) = forward(&p, &g, Mode::Eval, &mut rng).unwrap();
    let (_, _, b) = forward(&p, &h, Mode::Eval, &mut rng).unwrap();
    for k in 0..a.pooled_len() {
        if a.pooled[k] != b.pooled[k] {
            assert!(a.argmax[k] as usize == cell || b.argmax[k] as usize == cell);
        }
    }
}

#[test]
fn empty_grid_predicts_identity_rotation_at_init() {
    let cfg = tiny_config();
    let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let g = FeatureGrid::empty(cfg.d1, cfg.d2, cfg.input_channels);
    let (t, q, _) = forward(&p, &g, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(q, crate::geometry::Quaternion::IDENTITY);
    assert_eq!(t, crate::geometry::Vec3::zeros());
}

#[test]
fn eval_is_bit_identical() {
    let cfg = tiny_config();
    let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = random_grid(&mut rng, &cfg, 0.5);
    let (t1, q1, _) = forward(&p, &g, Mode::Eval, &mut rng).unwrap();
    let (t2, q2, _) = forward(&p, &g, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    assert_eq!(t1, t2);
    assert_eq!(q1, q2);
}

#[test]
fn argmax_stays_in_region() {
    let cfg = SppNetConfig {
        width_multiplier: 0.05,
        ..SppNetConfig::new(8, 8, 6)
    };
    let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let grids: Vec<FeatureGrid> = (0..3).map(|_| random_grid(&mut rng, &cfg, 0.4)).collect();
    let refs: Vec<&FeatureGrid> = grids.iter().collect();
    let out = forward_batch(&p, &refs, Mode::Train, &mut rng).unwrap();
    let tr = &out.trace;
    for b in 0..3 {
        for s in 0..3 {
            let c = cfg.branch_output(s);
            let r = SppNetConfig::regions_per_side(s);
            for u in 0..r * r * c {
                let at = b * cfg.pooled_len() + cfg.level_offset(s) + u;
                let cell = tr.argmax[at] as usize;
                let region = u / c;
                let (i, j) = (cell / cfg.d2, cell % cfg.d2);
                assert_eq!((i / (cfg.d1 / r)) * r + j / (cfg.d2 / r), region);
            }
        }
    }
}

/// `Σ_b <a_b, T_b> + <c_b, q_b>` for fixed random coefficients.
fn probe_loss(
    p: &SppNetParams,
    grids: &[&FeatureGrid],
    coef_t: &[[f64; 3]],
    coef_q: &[[f64; 4]],
    seed: u64,
) -> f64 {
    let out = forward_batch(p, grids, Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut l = 0.0;
    for b in 0..grids.len() {
        l += (0..3)
            .map(|k| coef_t[b][k] * out.translations[b][k])
            .sum::<f64>();
        l += (0..4)
            .map(|k| coef_q[b][k] * out.rotations[b][k])
            .sum::<f64>();
    }
    l
}

fn finite_difference_check(cfg: SppNetConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut p = init_params(&cfg, &mut rng).unwrap();
    // non-trivial biases and normalization parameters
    for v in p.values.iter_mut() {
        *v += rng.random_range(-0.05..0.05);
    }
    let grids: Vec<FeatureGrid> = (0..3).map(|_| random_grid(&mut rng, &cfg, 0.7)).collect();
    let refs: Vec<&FeatureGrid> = grids.iter().collect();
    let coef_t: Vec<[f64; 3]> = (0..3).map(|_| rng.random()).collect();
    let coef_q: Vec<[f64; 4]> = (0..3).map(|_| rng.random()).collect();
    let seed = 77;
    let out = forward_batch(&p, &refs, Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let grads = backward(&p, &out.trace, &coef_t, &coef_q).unwrap();

    let h = 1e-4;
    let mut checked = 0;
    let tensors = p.layout.tensors.clone();
    for t in tensors.iter().filter(|t| t.kind != ParamKind::LogSigma) {
        let picks = 200 / tensors.len() + 2;
        for _ in 0..picks {
            let i = t.offset + rng.random_range(0..t.len());
            let orig = p.values[i];
            p.values[i] = orig + h;
            let up = probe_loss(&p, &refs, &coef_t, &coef_q, seed);
            p.values[i] = orig - h;
            let down = probe_loss(&p, &refs, &coef_t, &coef_q, seed);
            p.values[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.values[i];
            let rel = (analytic - numeric).abs() / (analytic.abs() + 1e-6);
            assert!(
                rel <= 1e-3,
                "{} [{}]: analytic {analytic} numeric {numeric}",
                t.name,
                i - t.offset
            );
            checked += 1;
        }
    }
    assert!(checked >= 200, "{checked}");
}

#[test]
fn gradients_match_finite_differences() {
    finite_difference_check(tiny_config());
}

#[test]
fn gradients_match_finite_differences_relu_first() {
    finite_difference_check(SppNetConfig {
        bn_order: BnOrder::ConvReluBn,
        ..tiny_config()
    });
}

#[test]
fn eval_mode_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut p = init_params(&cfg, &mut rng).unwrap();
    p.running
        .iter_mut()
        .for_each(|v| *v += rng.random_range(0.0..0.2));
    for v in p.values.iter_mut() {
        *v += rng.random_range(-0.05..0.05);
    }
    let g = random_grid(&mut rng, &cfg, 0.7);
    let eval = |p: &SppNetParams| {
        let (t, q, _) = forward(p, &g, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        t.sum() + q.w - q.z
    };
    let (_, _, trace) = forward(&p, &g, Mode::Eval, &mut rng).unwrap();
    let grads = backward(&p, &trace, &[[1.0; 3]], &[[1.0, 0.0, 0.0, -1.0]]).unwrap();
    for _ in 0..100 {
        let i = rng.random_range(0..p.values.len() - 2);
        let orig = p.values[i];
        p.values[i] = orig + 1e-4;
        let up = eval(&p);
        p.values[i] = orig - 1e-4;
        let down = eval(&p);
        p.values[i] = orig;
        let numeric = (up - down) / 2e-4;
        assert!(
            (grads.values[i] - numeric).abs() / (grads.values[i].abs() + 1e-6) <= 1e-3,
            "{i} {} {numeric}",
            grads.values[i]
        );
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let p = init_params(&cfg, &mut rng).unwrap();
    let g = random_grid(&mut rng, &cfg, 0.5);
    let out = forward_batch(&p, &[&g, &g], Mode::Train, &mut rng).unwrap();
    let grads = backward(&p, &out.trace, &[[0.0; 3]; 2], &[[0.0; 4]; 2]).unwrap();
    assert!(grads.values.iter().all(|v| *v == 0.0));
}

#[test]
fn unused_branches_get_no_gradient() {
    let cfg = SppNetConfig {
        pyramid_levels: vec![0],
        ..tiny_config()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let p = init_params(&cfg, &mut rng).unwrap();
    assert_eq!(cfg.pooled_len(), cfg.branch_output(0));
    let g = random_grid(&mut rng, &cfg, 0.5);
    let out = forward_batch(&p, &[&g, &g], Mode::Train, &mut rng).unwrap();
    let grads = backward(&p, &out.trace, &[[1.0; 3]; 2], &[[1.0; 4]; 2]).unwrap();
    for t in &p.layout.tensors {
        let g = grads.tensor(t);
        if t.name.starts_with("conv1") || t.name.starts_with("conv2") {
            assert!(g.iter().all(|v| *v == 0.0), "{}", t.name);
        }
    }
    assert!(grads
        .tensor(p.layout.tensor("conv0/1.weight").unwrap())
        .iter()
        .any(|v| *v != 0.0));
}

#[test]
fn stale_trace_is_rejected() {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut p = init_params(&cfg, &mut rng).unwrap();
    let g = random_grid(&mut rng, &cfg, 0.5);
    let out = forward_batch(&p, &[&g, &g], Mode::Train, &mut rng).unwrap();
    p.touch();
    let r = backward(&p, &out.trace, &[[1.0; 3]; 2], &[[1.0; 4]; 2]);
    assert!(matches!(r, Err(crate::Error::TraceMismatch { .. })));
}

#[test]
fn zeroing_a_branch_removes_its_channels() {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut p = init_params(&cfg, &mut rng).unwrap();
    let g = random_grid(&mut rng, &cfg, 0.5);
    for name in [
        "conv1/4.weight",
        "conv1/4.bias",
        "conv1/4.bn_gain",
        "conv1/4.bn_offset",
    ] {
        p.tensor_mut(name)
            .unwrap()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    let (_, _, tr) = forward(&p, &g, Mode::Eval, &mut rng).unwrap();
    let c = cfg.branch_output(1);
    let off = cfg.level_offset(1);
    assert!(tr.pooled[off..off + 4 * c].iter().all(|v| *v == 0.0));
}

#[test]
fn running_stats_follow_momentum() {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut p = init_params(&cfg, &mut rng).unwrap();
    let g = random_grid(&mut rng, &cfg, 0.5);
    let out = forward_batch(&p, &[&g, &g], Mode::Train, &mut rng).unwrap();
    p.update_running_stats(&out.trace);
    let t = &out.trace.branches[0].as_ref().unwrap()[0];
    let slots = &p.layout.convs[0][0];
    let rows = 32.0;
    assert!((p.running[slots.running_mean.start] - 0.1 * t.mean[0]).abs() < 1e-15);
    let expect = 0.9 + 0.1 * t.var[0] * rows / (rows - 1.0);
    assert!((p.running[slots.running_var.start] - expect).abs() < 1e-15);
}
