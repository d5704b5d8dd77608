mod common;

use common::*;
use groundflow::encoders::{Stream, TokenSequence};
use groundflow::expert::{
    cfm_interpolate, euler_integrate, oracle_field, target_vector_field, FlowState, Model, NormKind,
};
use groundflow::tensor::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn flow(seed: u64, tau: f64) -> FlowState<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FlowState {
        x_tau: Mat::randn(4, 3, 1.0, &mut rng),
        tau,
    }
}

#[test]
fn interpolation_anchors() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Mat::<f64>::randn(16, 3, 1.0, &mut rng);
    let z = Mat::<f64>::randn(16, 3, 1.0, &mut rng);
    assert_eq!(cfm_interpolate(&a, &z, 0.0).unwrap().x_tau, z);
    assert_eq!(cfm_interpolate(&a, &z, 1.0).unwrap().x_tau, a);
    let ones = Mat::<f64>::filled(2, 3, 1.0);
    let mid = cfm_interpolate(&ones, &ones.map(|v| -v), 0.5).unwrap();
    assert!(mid.x_tau.data.iter().all(|&v| v == 0.0));
    assert!(cfm_interpolate(&a, &z, 1.5).is_err());
    assert!(target_vector_field(&a, &a)
        .unwrap()
        .data
        .iter()
        .all(|&v| v == 0.0));
}

#[test]
fn path_velocity_is_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Mat::<f64>::randn(4, 3, 1.0, &mut rng);
    let z = Mat::<f64>::randn(4, 3, 1.0, &mut rng);
    let u = target_vector_field(&a, &z).unwrap();
    let h = 1e-6;
    for tau in [0.1, 0.5, 0.9] {
        let p = cfm_interpolate(&a, &z, tau + h).unwrap().x_tau;
        let m = cfm_interpolate(&a, &z, tau - h).unwrap().x_tau;
        let fd = p.zip_map(&m, |x, y| (x - y) / (2.0 * h));
        assert!(fd.max_abs_diff(&u) < 1e-8);
    }
}

#[test]
fn euler_on_exact_field_recovers_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = Mat::<f64>::randn(16, 3, 0.5, &mut rng);
    for steps in [1, 2, 5, 10, 20, 37] {
        let z = Mat::<f64>::randn(16, 3, 1.0, &mut rng);
        let u = target_vector_field(&a, &z).unwrap();
        let x = euler_integrate(z.clone(), steps, |_, _| u.clone());
        assert!(x.max_abs_diff(&a) < 1e-12, "{steps}");
        let y = euler_integrate(z, steps, oracle_field(&a));
        assert!(y.max_abs_diff(&a) < 1e-9, "{steps}");
    }
}

#[test]
fn single_step_is_one_evaluation() {
    let z = Mat::<f64>::filled(2, 2, 0.25);
    let x = euler_integrate(z.clone(), 1, |x, tau| {
        assert_eq!(tau, 0.0);
        x.map(|v| 2.0 * v + 1.0)
    });
    assert_eq!(x, z.map(|v| v + 2.0 * v + 1.0));
}

#[test]
fn output_shape_and_identity_at_init() {
    let model = Model::<f64>::new(micro_config(8, 2, full_order())).unwrap();
    let ctx = model.encode(&random_input(&model, "pick the red block", 0));
    let v = model.forward(&flow(0, 0.3), &ctx).unwrap();
    assert_eq!(v.shape(), (4, 3));
    // zero-initialized decoder and gates: the field starts at exactly zero
    assert!(v.data.iter().all(|&x| x == 0.0));
}

#[test]
fn missing_stream_is_error() {
    let model = Model::<f64>::new(micro_config(8, 1, full_order())).unwrap();
    let mut ctx = model.encode(&random_input(&model, "pick the red block", 0));
    ctx.local = None;
    assert!(model.forward(&flow(0, 0.3), &ctx).is_err());
}

#[test]
fn config_validation() {
    let mut c = micro_config(8, 1, full_order());
    c.dit.kv_heads = 3;
    assert!(Model::<f64>::new(c.clone()).is_err());
    c.dit.kv_heads = 1;
    c.dit.ordering = vec![];
    assert!(Model::<f64>::new(c.clone()).is_err());
    c.dit.ordering = vec![Stream::Lang, Stream::Lang];
    assert!(Model::<f64>::new(c).is_err());
}

#[test]
fn ordering_changes_output() {
    let a_cfg = micro_config(8, 2, vec![Stream::Global, Stream::Local, Stream::Lang]);
    let b_cfg = micro_config(8, 2, vec![Stream::Local, Stream::Global, Stream::Lang]);
    let mut a = Model::<f64>::new(a_cfg).unwrap();
    randomize(&mut a, 0.5, 3);
    let mut b = Model::<f64>::new(b_cfg).unwrap();
    b.params = a.params.clone();
    let ctx = a.encode(&random_input(&a, "pick the red block", 1));
    let va = a.forward(&flow(1, 0.4), &ctx).unwrap();
    let vb = b.forward(&flow(1, 0.4), &ctx).unwrap();
    assert!(va.max_abs_diff(&vb) > 1e-6);
}

#[test]
fn zero_cross_outputs_ignore_context() {
    let mut model = Model::<f64>::new(micro_config(8, 2, full_order())).unwrap();
    randomize(&mut model, 0.5, 4);
    for n in model.cross_output_names() {
        let id = model.params.id(&n).unwrap();
        let (r, c) = model.params.get(id).shape();
        *model.params.get_mut(id) = Mat::zeros(r, c);
    }
    let mut c1 = model.encode(&random_input(&model, "pick the red block", 1));
    let c2 = model.encode(&random_input(
        &model,
        "place the red block on the blue plate",
        2,
    ));
    c1.state = c2.state.clone();
    let v1 = model.forward(&flow(3, 0.6), &c1).unwrap();
    let v2 = model.forward(&flow(3, 0.6), &c2).unwrap();
    assert!(v1.max_abs_diff(&v2) < 1e-12);
}

#[test]
fn token_permutation_within_stream_is_invisible() {
    let mut model = Model::<f64>::new(micro_config(8, 2, full_order())).unwrap();
    randomize(&mut model, 0.5, 5);
    let ctx = model.encode(&random_input(
        &model,
        "place the red block on the blue plate",
        1,
    ));
    let mut perm = ctx.clone();
    for s in [&mut perm.global, &mut perm.local, &mut perm.lang] {
        let t = s.as_mut().unwrap();
        let n = t.tokens.rows;
        let rows: Vec<Vec<f64>> = (0..n).rev().map(|r| t.tokens.row(r).to_vec()).collect();
        t.tokens = Mat::from_vec(n, t.tokens.cols, rows.concat());
    }
    let a = model.forward(&flow(2, 0.7), &ctx).unwrap();
    let b = model.forward(&flow(2, 0.7), &perm).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn rms_norm_variant_runs() {
    let mut c = micro_config(8, 1, full_order());
    c.dit.norm_kind = NormKind::RmsNorm;
    let mut model = Model::<f64>::new(c).unwrap();
    randomize(&mut model, 0.5, 6);
    let ctx = model.encode(&random_input(&model, "pick the red block", 0));
    assert!(model.forward(&flow(0, 0.1), &ctx).unwrap().all_finite());
}

#[test]
fn local_copy_from_global() {
    let mut model = Model::<f64>::new(micro_config(8, 2, full_order())).unwrap();
    randomize(&mut model, 0.5, 8);
    model.init_local_from_global().unwrap();
    for (g, l) in model
        .cross_param_names(Stream::Global)
        .iter()
        .zip(model.cross_param_names(Stream::Local))
    {
        assert_eq!(model.params.by_name(g), model.params.by_name(&l));
    }
    let ctx = model.encode(&random_input(&model, "pick the red block", 3));
    let g = ctx.global.clone().unwrap();
    let as_local = TokenSequence {
        tokens: g.tokens.clone(),
        stream: Stream::Local,
    };
    let lang = ctx.lang.clone().unwrap();
    let f = flow(5, 0.35);
    let via_local = model
        .forward_with_streams(
            &f,
            &ctx.state,
            &[
                (Stream::Global, &g),
                (Stream::Local, &as_local),
                (Stream::Lang, &lang),
            ],
        )
        .unwrap();
    let twice_global = model
        .forward_with_streams(
            &f,
            &ctx.state,
            &[
                (Stream::Global, &g),
                (Stream::Global, &g),
                (Stream::Lang, &lang),
            ],
        )
        .unwrap();
    assert!(via_local.max_abs_diff(&twice_global) < 1e-12);
}

#[test]
fn training_step_decorrelates_copied_weights() {
    use groundflow::optim::{AdamW, AdamWConfig};
    let mut model = Model::<f64>::new(micro_config(8, 1, full_order())).unwrap();
    randomize(&mut model, 0.3, 9);
    model.init_local_from_global().unwrap();
    let samples: Vec<_> = (0..4)
        .map(|i| random_sample(&model, "pick the red block", i))
        .collect();
    let batch: Vec<_> = samples.iter().collect();
    let mut opt = AdamW::new(
        &model.params,
        AdamWConfig {
            warmup_steps: 0,
            ..AdamWConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, grads) = model.cfm_loss(&batch, &mut rng).unwrap();
    opt.step(&mut model.params, &grads);
    let dist: f64 = model
        .cross_param_names(Stream::Global)
        .iter()
        .zip(model.cross_param_names(Stream::Local))
        .map(|(g, l)| {
            model
                .params
                .by_name(g)
                .unwrap()
                .max_abs_diff(model.params.by_name(&l).unwrap())
        })
        .fold(0.0, f64::max);
    assert!(dist > 0.0);
}

#[test]
fn loss_is_zero_when_field_is_zero_and_target_is_zero() {
    let model = Model::<f64>::new(micro_config(8, 1, full_order())).unwrap();
    let mut s = random_sample(&model, "pick the red block", 0);
    let z = s.actions.clone();
    s.actions = z.clone();
    let (loss, _) = model.cfm_loss_with(&[&s], &[z], &[0.42]).unwrap();
    // the untrained field is identically zero and A = z makes the target zero
    assert_eq!(loss, 0.0);
    assert!(model.cfm_loss_with(&[], &[], &[]).is_err());
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let (err, at) = cfm_gradient_error(11);
    assert!(err < 1e-3, "{err} at {at}");
}

#[test]
fn timestep_changes_the_field() {
    let mut model = Model::<f64>::new(micro_config(8, 1, full_order())).unwrap();
    randomize(&mut model, 0.4, 9);
    let ctx = model.encode(&random_input(&model, "pick the red block", 1));
    let a = model.forward(&flow(2, 0.1), &ctx).unwrap();
    let b = model.forward(&flow(2, 0.9), &ctx).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-6);
}

#[test]
fn constant_chunks_are_recovered() {
    use groundflow::checkpoint::Checkpoint;
    use groundflow::expert::TrainSample;
    use groundflow::harness::{train_on_samples, TrainConfig};
    use groundflow::optim::AdamWConfig;

    let cfg = micro_config(16, 1, full_order());
    let model = Model::<f32>::new(cfg.clone()).unwrap();
    let target = Mat::<f32>::from_vec(4, 3, (0..12).map(|i| 0.6 - 0.1 * i as f32).collect());
    let samples: Vec<TrainSample<f32>> = (0..64)
        .map(|i| TrainSample {
            input: random_input(&model, "pick the red block", i),
            actions: target.clone(),
        })
        .collect();
    let tc = TrainConfig {
        model: cfg,
        optimizer: AdamWConfig {
            lr: 1e-3,
            warmup_steps: 50,
            ..Default::default()
        },
        steps: 1000,
        batch_size: 16,
        checkpoint_every: 1000,
        keep_checkpoints: 1,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let model = train_on_samples(&tc, Checkpoint::new(model), &samples, dir.path())
        .unwrap()
        .checkpoint
        .model;
    let mut mean = Mat::<f64>::zeros(4, 3);
    for i in 0..256 {
        let ctx = model.encode(&random_input(&model, "pick the red block", 1000 + i));
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let a = model.sample_actions(&ctx, 10, &mut rng).unwrap();
        for (m, v) in mean.data.iter_mut().zip(&a.data) {
            *m += *v as f64 / 256.0;
        }
    }
    let err = mean
        .data
        .iter()
        .zip(&target.data)
        .map(|(m, t)| (m - *t as f64).abs())
        .fold(0.0, f64::max);
    assert!(err < 0.05, "{err}");
}

#[test]
fn full_scale_layout_is_valid() {
    let c = groundflow::expert::DiTConfig::full_scale();
    c.validate().unwrap();
    assert_eq!(c.d_model % c.heads, 0);
}
