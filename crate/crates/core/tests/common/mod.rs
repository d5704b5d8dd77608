#![allow(dead_code)]

use groundflow::encoders::{EncoderConfig, Stream, ViewSpec};
use groundflow::expert::{DiTConfig, Model, ModelConfig, NormKind, PolicyInput, TrainSample};
use groundflow::plan::CropResult;
use groundflow::scalar::Scalar;
use groundflow::sim::{Image, View};
use groundflow::tensor::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn micro_config(d_model: usize, layers: usize, ordering: Vec<Stream>) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            patch: 4,
            views: vec![ViewSpec {
                view: View::Global,
                width: 8,
                height: 6,
            }],
            crop_side: 8,
            d_model,
            vocab: vec![
                "pick the red block".into(),
                "place the red block on the blue plate".into(),
            ],
            pe_temperature: 10000.0,
        },
        dit: DiTConfig {
            d_model,
            layers,
            heads: 2,
            kv_heads: 1,
            horizon: 4,
            d_a: 3,
            d_s: 3,
            ordering,
            norm_kind: NormKind::LayerNorm,
            norm_eps: 1e-5,
            ffn_hidden: 2 * d_model,
            ode_steps: 10,
            action_bound: 1.0,
        },
        init_seed: 7,
    }
}

pub fn full_order() -> Vec<Stream> {
    vec![Stream::Global, Stream::Local, Stream::Lang]
}

/// Replaces every parameter with Gaussian noise so no path is trivially zero.
pub fn randomize<T: Scalar>(model: &mut Model<T>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model.params.iter().map(|(_, n, _)| n.to_string()).collect();
    for n in names {
        let id = model.params.id(&n).unwrap();
        let (r, c) = model.params.get(id).shape();
        *model.params.get_mut(id) = Mat::randn(r, c, std, &mut rng);
    }
}

pub fn random_image(w: usize, h: usize, view: View, rng: &mut ChaCha8Rng) -> Image {
    let mut img = Image::filled(w, h, view, [0.0; 3]);
    for p in img.pixels.iter_mut() {
        *p = rng.gen();
    }
    img
}

pub fn random_input<T: Scalar>(model: &Model<T>, text: &str, seed: u64) -> PolicyInput<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = &model.cfg.encoder;
    let v = cfg.views[0];
    let img = random_image(v.width, v.height, v.view, &mut rng);
    let side = cfg.crop_side;
    let n = side / cfg.patch;
    let crop = CropResult {
        crop: random_image(side, side, View::Global, &mut rng),
        patch_centers: (0..n * n)
            .map(|_| [rng.gen_range(0.0..960.0), rng.gen_range(0.0..540.0)])
            .collect(),
        frame: (960, 540),
        source_rect: [0.0, 0.0, 960.0, 540.0],
    };
    PolicyInput {
        global: model.encoder.prepare_global(&[&img]).unwrap(),
        local: model.encoder.prepare_local(&crop, true).unwrap(),
        lang: model.encoder.prepare_lang(text).unwrap(),
        state: (0..model.cfg.dit.d_s)
            .map(|_| T::of(rng.gen_range(-1.0..1.0)))
            .collect(),
    }
}

pub fn random_sample<T: Scalar>(model: &Model<T>, text: &str, seed: u64) -> TrainSample<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let c = &model.cfg.dit;
    TrainSample {
        input: random_input(model, text, seed),
        actions: Mat::randn(c.horizon, c.d_a, 0.5, &mut rng),
    }
}

/// Worst per-entry relative error between analytic and central-difference
/// gradients of the flow-matching loss over every parameter.
pub fn cfm_gradient_error(seed: u64) -> (f64, String) {
    let mut model = Model::<f64>::new(micro_config(8, 1, full_order())).unwrap();
    randomize(&mut model, 0.4, seed);
    let s1 = random_sample(&model, "pick the red block", seed);
    let s2 = random_sample(&model, "place the red block on the blue plate", seed + 100);
    let batch = [&s1, &s2];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<Mat<f64>> = (0..2).map(|_| Mat::randn(4, 3, 1.0, &mut rng)).collect();
    let taus = [rng.gen::<f64>(), rng.gen::<f64>()];
    let (_, grads) = model.cfm_loss_with(&batch, &noise, &taus).unwrap();
    let h = 1e-5;
    let mut worst = (0.0, String::new());
    let names: Vec<String> = model.params.iter().map(|(_, n, _)| n.to_string()).collect();
    for name in names {
        let id = model.params.id(&name).unwrap();
        let len = model.params.get(id).len();
        for i in 0..len {
            let orig = model.params.get(id).data[i];
            model.params.get_mut(id).data[i] = orig + h;
            let fp = model.cfm_loss_with(&batch, &noise, &taus).unwrap().0;
            model.params.get_mut(id).data[i] = orig - h;
            let fm = model.cfm_loss_with(&batch, &noise, &taus).unwrap().0;
            model.params.get_mut(id).data[i] = orig;
            let num = (fp - fm) / (2.0 * h);
            let ana = grads.get(id).map_or(0.0, |g| g.data[i]);
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}] ana={ana:e} num={num:e}"));
            }
        }
    }
    worst
}
