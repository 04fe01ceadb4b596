//! Analytic gradients against central finite differences in f64.

mod common;

use common::grad::{conv_case, numeric_grad, rel_error, weighted_sum, INSTANCES, TOL};
use lora3d::lora::{AdaptedConv3d, LoraAdapter};
use lora3d::model::{build_classifier, BackboneConfig, HeadSettings, LoraSettings, TensorMap};
use lora3d::nn::{gelu, gelu_backward, Conv3d, Linear};
use lora3d::{RandomSource, Tensor};

fn check(what: &str, seed: u64, analytic: &Tensor<f64>, numeric: &[f64]) {
    let e = rel_error(analytic.data(), numeric);
    assert!(e <= TOL, "{what} (instance {seed}): relative error {e:.3e}");
}

#[test]
fn conv3d_gradients() {
    for seed in 0..INSTANCES {
        let c = conv_case(seed);
        let conv = |w: &Tensor<f64>, b: &Tensor<f64>| Conv3d::new(w.clone(), Some(b.clone()), c.stride, c.padding).unwrap();
        let base = conv(&c.weight, &c.bias);
        let y = base.forward(&c.x).unwrap();
        let coeff = Tensor::randn(y.shape().to_vec(), &mut RandomSource::new(seed + 100), 0.0, 1.0).unwrap();
        let g = base.backward(&c.x, &coeff).unwrap();

        let num_w = numeric_grad(&c.weight, |w| weighted_sum(&conv(w, &c.bias).forward(&c.x).unwrap(), &coeff));
        check("conv weight", seed, g.param("weight").unwrap(), &num_w);
        let num_b = numeric_grad(&c.bias, |b| weighted_sum(&conv(&c.weight, b).forward(&c.x).unwrap(), &coeff));
        check("conv bias", seed, g.param("bias").unwrap(), &num_b);
        let num_x = numeric_grad(&c.x, |x| weighted_sum(&base.forward(x).unwrap(), &coeff));
        check("conv input", seed, &g.input, &num_x);
    }
}

#[test]
fn linear_gradients() {
    for seed in 0..INSTANCES {
        let mut r = RandomSource::new(seed);
        let (n, fin, fout) = (1 + r.below(4), 1 + r.below(6), 1 + r.below(5));
        let x = Tensor::randn([n, fin], &mut r, 0.0, 1.0).unwrap();
        let w = Tensor::randn([fout, fin], &mut r, 0.0, 1.0).unwrap();
        let b = Tensor::randn([fout], &mut r, 0.0, 1.0).unwrap();
        let coeff = Tensor::randn([n, fout], &mut r, 0.0, 1.0).unwrap();
        let lin = |w: &Tensor<f64>, b: &Tensor<f64>| Linear::new(w.clone(), b.clone()).unwrap();
        let base = lin(&w, &b);
        let g = base.backward(&x, &coeff).unwrap();
        check("linear weight", seed, g.param("weight").unwrap(), &numeric_grad(&w, |w| weighted_sum(&lin(w, &b).forward(&x).unwrap(), &coeff)));
        check("linear bias", seed, g.param("bias").unwrap(), &numeric_grad(&b, |b| weighted_sum(&lin(&w, b).forward(&x).unwrap(), &coeff)));
        check("linear input", seed, &g.input, &numeric_grad(&x, |x| weighted_sum(&base.forward(x).unwrap(), &coeff)));
    }
}

#[test]
fn gelu_gradients() {
    for seed in 0..INSTANCES {
        let mut r = RandomSource::new(seed);
        let x = Tensor::randn([3, 1 + r.below(10)], &mut r, 0.0, 2.0).unwrap();
        let coeff = Tensor::randn(x.shape().to_vec(), &mut r, 0.0, 1.0).unwrap();
        let analytic = gelu_backward(&x, &coeff).unwrap();
        check("gelu", seed, &analytic, &numeric_grad(&x, |x| weighted_sum(&gelu(x), &coeff)));
    }
}

#[test]
fn adapter_gradients() {
    for seed in 0..INSTANCES {
        let c = conv_case(seed);
        let mut r = RandomSource::new(seed + 1000);
        let [d_out, d_in, k, _, _] = <[usize; 5]>::try_from(c.weight.shape()).unwrap();
        let rank = 1 + r.below(d_out.min(d_in * k * k * k).min(3));
        let a = Tensor::randn([rank, d_in * k * k * k], &mut r, 0.0, 0.5).unwrap();
        let b = Tensor::randn([d_out, rank], &mut r, 0.0, 0.5).unwrap();
        let scale = 0.5 + r.uniform();
        let frozen = Conv3d::new(c.weight.clone(), Some(c.bias.clone()), c.stride, c.padding).unwrap();
        let adapted = |a: &Tensor<f64>, b: &Tensor<f64>| {
            AdaptedConv3d::new(frozen.clone(), Some(LoraAdapter::from_factors(a.clone(), b.clone(), scale).unwrap())).unwrap()
        };
        let base = adapted(&a, &b);
        let y = base.forward(&c.x).unwrap();
        let coeff = Tensor::randn(y.shape().to_vec(), &mut r, 0.0, 1.0).unwrap();
        let g = base.backward(&c.x, &coeff).unwrap();
        let loss_ab = |a: &Tensor<f64>, b: &Tensor<f64>| weighted_sum(&adapted(a, b).forward(&c.x).unwrap(), &coeff);
        check("adapter A", seed, g.param("lora_a").unwrap(), &numeric_grad(&a, |a| loss_ab(a, &b)));
        check("adapter B", seed, g.param("lora_b").unwrap(), &numeric_grad(&b, |b| loss_ab(&a, b)));
        check("adapter input", seed, &g.input, &numeric_grad(&c.x, |x| weighted_sum(&base.forward(x).unwrap(), &coeff)));
        // The parallel path differentiates to the same values.
        let yp = base.forward_parallel(&c.x).unwrap();
        assert!(yp.max_abs_diff(&y).unwrap() <= 1e-12);
    }
}

#[test]
fn whole_model_gradients() {
    for seed in 0..3 {
        let config = BackboneConfig::tiny(1);
        let mut model = build_classifier::<f64>(
            &config,
            &LoraSettings::default(),
            &HeadSettings::default(),
            None,
            &mut RandomSource::new(seed),
            &mut RandomSource::new(seed + 50),
        )
        .unwrap();
        // Non-zero B so every adapter factor has a non-trivial gradient.
        let mut r = RandomSource::new(seed + 70);
        let mut nudged: TensorMap<f64> = TensorMap::new();
        for (name, t) in model.trainable_tensors() {
            if name.ends_with(".lora_b") {
                nudged.insert(name, Tensor::randn(t.shape().to_vec(), &mut r, 0.0, 0.05).unwrap());
            }
        }
        model.load_tensors(&nudged).unwrap();
        model.set_training(false);
        let x = Tensor::randn([2, 1, 6, 6, 6], &mut r, 0.0, 1.0).unwrap();
        let coeff = Tensor::from_vec([2], vec![0.7, -1.3]).unwrap();
        let (_, cache) = model.forward_cached(&x, None).unwrap();
        let grads = model.backward(&cache, &coeff).unwrap();
        let params = model.trainable_tensors();
        assert_eq!(grads.keys().collect::<Vec<_>>(), params.keys().collect::<Vec<_>>());
        for (name, t) in &params {
            let numeric = numeric_grad(t, |p| {
                let mut m = model.clone();
                let mut one = TensorMap::new();
                one.insert(name.clone(), p.clone());
                m.load_tensors(&one).unwrap();
                weighted_sum(&m.logits(&x).unwrap(), &coeff)
            });
            check(name, seed, &grads[name], &numeric);
        }
    }
}
