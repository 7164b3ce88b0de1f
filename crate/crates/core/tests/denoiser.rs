use precipdiff_core::nn::{build_unet, noise_embedding, DenoiserModel, UNetConfig};
use precipdiff_core::tensor::{grad_check, Graph, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(channels: &[usize], embed: usize) -> UNetConfig {
    UNetConfig { noise_embed_dim: embed, ..UNetConfig::new(channels) }
}

fn inputs(n: usize, h: usize, w: usize, embed: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(&[n, 1, h, w], 1.0, &mut r);
    let cond = Tensor::randn(&[n, 1, h, w], 1.0, &mut r);
    let c_noise: Vec<f64> = (0..n).map(|i| -0.5 + 0.3 * i as f64).collect();
    (x, noise_embedding(&c_noise, embed).unwrap(), cond)
}

/// Replaces the zero output layer with random weights so every parameter
/// influences the output.
fn randomize_output(model: &mut DenoiserModel, seed: u64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model.params().names().to_vec();
    for (name, t) in names.iter().zip(model.params_mut().tensors_mut()) {
        if name.starts_with("conv_out") {
            *t = Tensor::randn(t.shape(), 0.3, &mut r);
        }
    }
}

#[test]
fn shapes_are_preserved() {
    let m = build_unet(tiny(&[8, 16], 8), 0).unwrap();
    let (x, e, c) = inputs(1, 16, 16, 8, 1);
    assert_eq!(m.forward_tensors(&x, &e, &c).unwrap().shape(), &[1, 1, 16, 16]);

    let m = build_unet(UNetConfig::new(&[32, 64, 128]), 0).unwrap();
    let (x, e, c) = inputs(1, 20, 20, 32, 2);
    assert_eq!(m.forward_tensors(&x, &e, &c).unwrap().shape(), &[1, 1, 20, 20]);

    // Odd user grids are reflect-padded internally and cropped back.
    let mut m = build_unet(tiny(&[8, 8, 8], 8), 0).unwrap();
    randomize_output(&mut m, 4);
    let (x, e, c) = inputs(2, 13, 10, 8, 3);
    let y = m.forward_tensors(&x, &e, &c).unwrap();
    assert_eq!(y.shape(), &[2, 1, 13, 10]);
    assert!(y.is_finite());
}

#[test]
fn indivisible_size_is_rejected_without_padding() {
    let cfg = UNetConfig { pad_to_multiple: false, ..tiny(&[8, 8, 8], 8) };
    let m = build_unet(cfg, 0).unwrap();
    let (x, e, c) = inputs(1, 10, 12, 8, 0);
    assert!(matches!(m.forward_tensors(&x, &e, &c), Err(TensorError::InvalidShape(_))));
}

#[test]
fn config_validation() {
    assert!(build_unet(tiny(&[8], 8), 0).is_err());
    assert!(build_unet(tiny(&[8, 16], 7), 0).is_err());
    let mut cfg = tiny(&[8, 16], 8);
    cfg.blocks = 3;
    assert!(matches!(build_unet(cfg, 0), Err(TensorError::InvalidConfig(_))));
}

#[test]
fn parameter_count_is_a_function_of_config() {
    let a = build_unet(tiny(&[8, 16, 32], 16), 1).unwrap();
    let b = build_unet(tiny(&[8, 16, 32], 16), 99).unwrap();
    assert_eq!(a.param_count(), b.param_count());
    assert_ne!(a.params(), b.params());
    assert_eq!(a.params().names(), b.params().names());
}

#[test]
fn fresh_model_outputs_zero() {
    let m = build_unet(tiny(&[8, 16, 32], 16), 7).unwrap();
    let (x, e, c) = inputs(3, 16, 16, 16, 9);
    let y = m.forward_tensors(&x, &e, &c).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn deterministic_and_batch_independent() {
    let mut m = build_unet(tiny(&[8, 16], 8), 3).unwrap();
    randomize_output(&mut m, 5);
    let (x, e, c) = inputs(3, 8, 8, 8, 11);
    let y1 = m.forward_tensors(&x, &e, &c).unwrap();
    let y2 = m.forward_tensors(&x, &e, &c).unwrap();
    assert_eq!(y1.data(), y2.data());
    let m2 = {
        let mut m2 = build_unet(tiny(&[8, 16], 8), 3).unwrap();
        randomize_output(&mut m2, 5);
        m2
    };
    assert_eq!(m2.forward_tensors(&x, &e, &c).unwrap().data(), y1.data());

    let perm = [2, 0, 1];
    let yp = m
        .forward_tensors(&x.select_items(&perm).unwrap(), &e.select_items(&perm).unwrap(), &c.select_items(&perm).unwrap())
        .unwrap();
    let expected = y1.select_items(&perm).unwrap();
    let err = yp.data().iter().zip(expected.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-12, "{err}");
}

#[test]
fn mean_output_gradient_matches_finite_differences_for_every_parameter() {
    let mut model = build_unet(tiny(&[8, 16], 8), 21).unwrap();
    randomize_output(&mut model, 22);
    let (x, e, c) = inputs(1, 8, 8, 8, 23);
    let shapes: Vec<Vec<usize>> = model.params().tensors().iter().map(|t| t.shape().to_vec()).collect();
    let point: Vec<f64> = model.params().tensors().iter().flat_map(|t| t.data().to_vec()).collect();
    let names = model.params().names().to_vec();
    let cfg = model.config().clone();

    let f = |p: &[f64]| {
        let mut store = precipdiff_core::tensor::ParamStore::new();
        let mut off = 0;
        for (name, s) in names.iter().zip(&shapes) {
            let n: usize = s.iter().product();
            store.push(name.clone(), Tensor::new(s, p[off..off + n].to_vec()).unwrap());
            off += n;
        }
        let m = DenoiserModel::from_params(cfg.clone(), store).unwrap();
        let mut g = Graph::new();
        let vars = m.bind(&mut g);
        let (xv, ev, cv) = (g.constant(x.clone()), g.constant(e.clone()), g.constant(c.clone()));
        let y = m.forward(&mut g, &vars, xv, ev, cv).unwrap();
        let loss = g.mean(y);
        let value = g.value(loss).item();
        let grads = g.backward(loss).unwrap();
        let analytic = vars.iter().flat_map(|v| grads.get(*v).unwrap().data().to_vec()).collect();
        (value, analytic)
    };
    let err = grad_check(f, &point, 1e-4).unwrap();
    assert!(err < 1e-3, "max relative error {err}");
}

#[test]
fn noise_embedding_properties() {
    let e0 = noise_embedding(&[0.0], 16).unwrap();
    assert!(e0.data()[..8].iter().all(|&v| v == 0.0));
    assert!(e0.data()[8..].iter().all(|&v| v == 1.0));
    assert_eq!(noise_embedding(&[0.3, -1.1], 16).unwrap(), noise_embedding(&[0.3, -1.1], 16).unwrap());
    assert!(matches!(noise_embedding(&[0.0], 7), Err(TensorError::InvalidConfig(_))));

    let e1 = noise_embedding(&[1.0], 32).unwrap();
    let e0 = noise_embedding(&[0.0], 32).unwrap();
    let dot: f64 = e0.data().iter().zip(e1.data()).map(|(a, b)| a * b).sum();
    let norm = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let cosine = dot / (norm(&e0) * norm(&e1));
    assert!(cosine < 0.99, "cosine similarity {cosine}");
}

#[test]
fn full_size_downscaling_network_preserves_shape() {
    let m = build_unet(UNetConfig::new(&[128, 256, 256, 512]), 0).unwrap();
    let (x, e, c) = inputs(1, 184, 200, 32, 5);
    let y = m.forward_tensors(&x, &e, &c).unwrap();
    assert_eq!(y.shape(), &[1, 1, 184, 200]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}
