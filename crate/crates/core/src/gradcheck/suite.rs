//! The finite-difference suite: every layer kind w.r.t. inputs and
//! parameters, the attention module, the ArcFace loss and the end-to-end
//! mixup loss of a small model, each over a range of seeds in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{compare_with_fd, grad_check, GradCheckReport};
use crate::autodiff::{Graph, NormMode, Pad1d, Var};
use crate::config::Config;
use crate::model::feature_net::{apply_attention, Attention};
use crate::model::layers::{Builder, Env};
use crate::model::{arcface, Model, ModelError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError};

/// Aggregated result of one check over all seeds.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub seeds: usize,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.passed() && self.report.max_rel_error < self.report.tol
    }
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape product matches")
}

fn over_seeds(
    name: &str,
    seeds: usize,
    tol: f64,
    mut one: impl FnMut(&mut ChaCha8Rng) -> Result<GradCheckReport, ModelError>,
) -> Result<CheckResult, ModelError> {
    let mut total = GradCheckReport {
        tol,
        checked: 0,
        max_rel_error: 0.0,
        nonsmooth: 0,
        failures: Vec::new(),
    };
    for seed in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        total.merge(one(&mut rng)?);
    }
    Ok(CheckResult {
        name: name.to_string(),
        seeds,
        report: total,
    })
}

type Layer = fn(&mut Graph<f64>, Var, &mut ChaCha8Rng) -> Result<Var, TensorError>;

/// Layer kinds checked with the input as the variable.
fn input_layers() -> Vec<(&'static str, Vec<usize>, Layer)> {
    vec![
        ("depthwise2d", vec![2, 3, 5, 4], |g, x, r| {
            let k = g.constant(rand_tensor(r, &[3, 3, 3]));
            g.depthwise_conv2d(x, k, 2, (1, 1))
        }),
        ("conv2d", vec![2, 2, 4, 5], |g, x, r| {
            let k = g.constant(rand_tensor(r, &[3, 2, 3, 3]));
            g.conv2d(x, k, 1, (1, 1))
        }),
        ("pointwise", vec![2, 3, 2, 2], |g, x, r| {
            let w = g.constant(rand_tensor(r, &[4, 3]));
            let b = g.constant(rand_tensor(r, &[4]));
            g.pointwise(x, w, Some(b))
        }),
        ("depthwise1d", vec![2, 1, 12], |g, x, r| {
            let k = g.constant(rand_tensor(r, &[3, 4]));
            g.depthwise_conv1d(x, k, 2, Pad1d::Reflect(2))
        }),
        ("linear", vec![3, 4], |g, x, r| {
            let w = g.constant(rand_tensor(r, &[4, 2]));
            g.linear(x, w, None)
        }),
        ("matmul_nt", vec![2, 4], |g, x, r| {
            let w = g.constant(rand_tensor(r, &[3, 4]));
            g.matmul_nt(x, w)
        }),
        ("batch_norm_train", vec![3, 2, 2], |g, x, r| {
            let ga = g.constant(rand_tensor(r, &[2]));
            let be = g.constant(rand_tensor(r, &[2]));
            Ok(g.batch_norm(x, ga, be, NormMode::Train, 1e-5)?.0)
        }),
        ("batch_norm_eval", vec![3, 2, 2], |g, x, r| {
            let ga = g.constant(rand_tensor(r, &[2]));
            let be = g.constant(rand_tensor(r, &[2]));
            let mode = NormMode::Eval {
                mean: vec![0.1, -0.2],
                var: vec![0.5, 2.0],
            };
            Ok(g.batch_norm(x, ga, be, mode, 1e-5)?.0)
        }),
        ("relu", vec![2, 5], |g, x, _| Ok(g.relu(x))),
        ("prelu", vec![2, 3, 2], |g, x, r| {
            let a = g.constant(rand_tensor(r, &[3]));
            g.prelu(x, a)
        }),
        ("sigmoid", vec![2, 5], |g, x, _| Ok(g.sigmoid(x))),
        ("global_avg_pool", vec![2, 3, 2, 2], |g, x, _| g.global_avg_pool(x)),
        ("l2_normalize_rows", vec![3, 4], |g, x, _| g.l2_normalize_rows(x)),
        ("safe_acos", vec![6], |g, x, _| {
            let s = g.sigmoid(x);
            Ok(g.safe_acos(s))
        }),
        ("swap_last2", vec![2, 3, 4], |g, x, _| g.swap_last2(x)),
        ("concat", vec![2, 1, 3], |g, x, r| {
            let other = g.constant(rand_tensor(r, &[2, 2, 3]));
            g.concat_channels(&[x, other])
        }),
    ]
}

/// Layer kinds checked with a parameter as the variable.
fn param_layers() -> Vec<(&'static str, Vec<usize>, Layer)> {
    vec![
        ("depthwise2d.kernel", vec![2, 3, 3], |g, k, r| {
            let x = g.constant(rand_tensor(r, &[2, 2, 4, 4]));
            g.depthwise_conv2d(x, k, 1, (1, 1))
        }),
        ("conv2d.kernel", vec![3, 2, 3, 3], |g, k, r| {
            let x = g.constant(rand_tensor(r, &[1, 2, 4, 3]));
            g.conv2d(x, k, 2, (1, 1))
        }),
        ("pointwise.weight", vec![3, 2], |g, w, r| {
            let x = g.constant(rand_tensor(r, &[2, 2, 3]));
            g.pointwise(x, w, None)
        }),
        ("pointwise.bias", vec![3], |g, b, r| {
            let x = g.constant(rand_tensor(r, &[2, 2, 3]));
            let w = g.constant(rand_tensor(r, &[3, 2]));
            g.pointwise(x, w, Some(b))
        }),
        ("depthwise1d.kernel", vec![2, 5], |g, k, r| {
            let x = g.constant(rand_tensor(r, &[2, 1, 16]));
            g.depthwise_conv1d(x, k, 3, Pad1d::Reflect(2))
        }),
        ("linear.weight", vec![3, 2], |g, w, r| {
            let x = g.constant(rand_tensor(r, &[4, 3]));
            let b = g.constant(rand_tensor(r, &[2]));
            g.linear(x, w, Some(b))
        }),
        ("batch_norm.gamma", vec![2], |g, ga, r| {
            let x = g.constant(rand_tensor(r, &[3, 2, 2]));
            let be = g.constant(rand_tensor(r, &[2]));
            Ok(g.batch_norm(x, ga, be, NormMode::Train, 1e-5)?.0)
        }),
        ("batch_norm.beta", vec![2], |g, be, r| {
            let x = g.constant(rand_tensor(r, &[3, 2, 2]));
            let ga = g.constant(rand_tensor(r, &[2]));
            Ok(g.batch_norm(x, ga, be, NormMode::Train, 1e-5)?.0)
        }),
        ("prelu.slope", vec![3], |g, a, r| {
            let x = g.constant(rand_tensor(r, &[2, 3, 2]));
            g.prelu(x, a)
        }),
    ]
}

/// Check `layer` with a random linear readout so the scalar depends on
/// every output element.
fn check_layer(rng: &mut ChaCha8Rng, shape: &[usize], layer: Layer, tol: f64) -> Result<GradCheckReport, ModelError> {
    let x0 = rand_tensor(rng, shape);
    let seed: u64 = rng.random();
    Ok(grad_check(
        |g, x| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let y = layer(g, x, &mut r)?;
            let w = g.constant(rand_tensor(&mut r, g.shape(y)));
            let p = g.mul(y, w)?;
            Ok(g.sum(p))
        },
        &x0,
        tol,
    )?)
}

pub fn layer_checks(seeds: usize, tol: f64) -> Result<Vec<CheckResult>, ModelError> {
    let mut out = Vec::new();
    for (name, shape, layer) in input_layers() {
        out.push(over_seeds(&format!("{name} (input)"), seeds, tol, |r| check_layer(r, &shape, layer, tol))?);
    }
    for (name, shape, layer) in param_layers() {
        out.push(over_seeds(name, seeds, tol, |r| check_layer(r, &shape, layer, tol))?);
    }
    Ok(out)
}

/// `sum(sigmoid(x·W + b))` w.r.t. `x`.
pub fn sigmoid_linear_check(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradCheckReport, ModelError> {
    let w = rand_tensor(rng, &[4, 3]);
    let b = rand_tensor(rng, &[3]);
    let x0 = rand_tensor(rng, &[2, 4]);
    Ok(grad_check(
        |g, x| {
            let w = g.constant(w.clone());
            let b = g.constant(b.clone());
            let l = g.linear(x, w, Some(b))?;
            let s = g.sigmoid(l);
            Ok(g.sum(s))
        },
        &x0,
        tol,
    )?)
}

/// Random one-hot rows and their mixup partners for a batch of `n`, with
/// partner `j = (i + 1) mod n`.
fn mixed_labels(rng: &mut ChaCha8Rng, n: usize, c: usize) -> (Tensor<f64>, Tensor<f64>, f64) {
    let lam: f64 = rng.random_range(0.05..0.95);
    let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let mut dom = vec![0.0; n * c];
    let mut mix = vec![0.0; n * c];
    for i in 0..n {
        let j = (i + 1) % n;
        dom[i * c + classes[i]] = 1.0;
        mix[i * c + classes[i]] += lam;
        mix[i * c + classes[j]] += 1.0 - lam;
    }
    (
        Tensor::new(vec![n, c], dom).unwrap(),
        Tensor::new(vec![n, c], mix).unwrap(),
        lam,
    )
}

/// ArcFace mixup loss w.r.t. raw (unnormalized) embeddings.
pub fn arcface_embedding_check(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradCheckReport, ModelError> {
    let (c, h) = (4, 6);
    let w = rand_tensor(rng, &[c, h]);
    let e0 = rand_tensor(rng, &[2, h]);
    let (dom, mix, lam) = mixed_labels(rng, 2, c);
    Ok(grad_check(
        |g, e| {
            let w = g.constant(w.clone());
            let wn = g.l2_normalize_rows(w)?;
            let en = g.l2_normalize_rows(e)?;
            let cos = g.matmul_nt(en, wn)?;
            let theta = g.safe_acos(cos);
            arcface::combined_loss_graph(g, theta, &dom, &mix, lam, 40.0, 0.7)
        },
        &e0,
        tol,
    )?)
}

/// Finite differences on selected parameter coordinates of a model-like
/// state.
fn check_param_coords<S: Clone>(
    state: &S,
    store: impl Fn(&mut S) -> &mut ParamStore<f64>,
    coords: &[(ParamId, usize)],
    tol: f64,
    loss: impl Fn(&S, &mut Graph<f64>) -> Result<Var, ModelError>,
) -> Result<GradCheckReport, ModelError> {
    let mut g = Graph::new();
    let l = loss(state, &mut g)?;
    let grads = g.backward(l)?;
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(id, k)| grads.param(id).map_or(0.0, |t| t.data()[k]))
        .collect();
    let mut work = state.clone();
    let x0: Vec<f64> = coords
        .iter()
        .map(|&(id, k)| store(&mut work).get(id).data()[k])
        .collect();
    let idx: Vec<usize> = (0..coords.len()).collect();
    let mut err = None;
    let report = compare_with_fd(&x0, &analytic, &idx, tol, |xs| {
        for (&(id, k), &v) in coords.iter().zip(xs) {
            store(&mut work).get_mut(id).data_mut()[k] = v;
        }
        let mut g = Graph::new();
        match loss(&work, &mut g) {
            Ok(l) => Ok(g.value(l).data()[0]),
            Err(e) => {
                err = Some(e);
                Ok(f64::NAN)
            }
        }
    })?;
    match err {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

fn random_coords(rng: &mut ChaCha8Rng, store: &ParamStore<f64>, n: usize) -> Vec<(ParamId, usize)> {
    let ids: Vec<ParamId> = store.ids().collect();
    let total = store.num_elements();
    // Distinct coordinates: a repeated one would be overwritten by its
    // unperturbed twin during the finite-difference pass.
    rand::seq::index::sample(rng, total, n.min(total))
        .into_iter()
        .map(|mut flat| {
            for &id in &ids {
                let len = store.get(id).len();
                if flat < len {
                    return (id, flat);
                }
                flat -= len;
            }
            unreachable!("flat index within total")
        })
        .collect()
}

#[derive(Clone)]
struct AttentionState {
    params: ParamStore<f64>,
    buffers: ParamStore<f64>,
    module: Attention,
}

impl AttentionState {
    fn new(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let module = {
            let mut b = Builder {
                params: &mut params,
                buffers: &mut buffers,
                rng,
            };
            Attention::new(&mut b, channels, true)
        };
        // Non-zero biases so ReLU kinks are not hit systematically.
        for id in params.ids().collect::<Vec<_>>() {
            if params.name(id).ends_with("bias") {
                let shape = params.get(id).shape().to_vec();
                params.set(id, rand_tensor(rng, &shape));
            }
        }
        AttentionState {
            params,
            buffers,
            module,
        }
    }

    fn weighted(&self, g: &mut Graph<f64>, x: Var, readout: &Tensor<f64>) -> Result<Var, ModelError> {
        let env = Env {
            params: &self.params,
            buffers: &self.buffers,
            train: true,
        };
        let h = self.module.forward(g, &env, x)?;
        let y = apply_attention(g, x, h)?;
        let w = g.constant(readout.clone());
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    }
}

/// `X̃ = f_ATT(X) ⊗ X` on an `8×8×2` input, w.r.t. `X`.
pub fn attention_input_check(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradCheckReport, ModelError> {
    let state = AttentionState::new(rng, 2);
    let x0 = rand_tensor(rng, &[1, 2, 8, 8]);
    let readout = rand_tensor(rng, &[1, 2, 8, 8]);
    Ok(grad_check(
        |g, x| state.weighted(g, x, &readout).map_err(|e| match e {
            ModelError::Tensor(t) => t,
            other => TensorError::invalid("attention", other.to_string()),
        }),
        &x0,
        tol,
    )?)
}

/// `X̃` w.r.t. ten random attention parameters.
pub fn attention_param_check(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradCheckReport, ModelError> {
    let state = AttentionState::new(rng, 2);
    let x = rand_tensor(rng, &[1, 2, 8, 8]);
    let readout = rand_tensor(rng, &[1, 2, 8, 8]);
    let coords = random_coords(rng, &state.params, 10);
    check_param_coords(&state, |s| &mut s.params, &coords, tol, |s, g| {
        let xv = g.constant(x.clone());
        s.weighted(g, xv, &readout)
    })
}

pub const E2E_BATCH: usize = 4;

/// Small configuration whose whole forward pass runs in milliseconds.
pub fn tiny_config() -> Config {
    let mut c = Config::default();
    c.features.sample_rate = 2000;
    c.features.clip_seconds = 0.5;
    c.features.n_mels = 8;
    c.model.h = 8;
    c.model.classes = 3;
    c.model.wavegram_multiplier = 2;
    c.model.width_mult = 0.1;
    c.train.batch = 2;
    c
}

/// Mixup loss `mean_i λ·L_AF(θ_i, y_i) + (1−λ)·L_AF(θ_i, y_mix)` of a
/// four-clip batch through the whole model in training mode, w.r.t. ten
/// random parameters. With two clips the final batch norm over a 1×1 map
/// maps any input to ±γ+β, leaving every upstream gradient at zero.
pub fn end_to_end_check(rng: &mut ChaCha8Rng, tol: f64) -> Result<GradCheckReport, ModelError> {
    let cfg = tiny_config();
    let mut model = Model::<f64>::new(&cfg, rng.random())?;
    // Random biases and BN shifts keep activations off the ReLU/PReLU kinks.
    for id in model.params().ids().collect::<Vec<_>>() {
        let name = model.params().name(id).to_string();
        if name.ends_with("bias") || name.ends_with("beta") {
            let shape = model.params().get(id).shape().to_vec();
            let t = rand_tensor(rng, &shape);
            model.params_mut().set(id, t);
        }
    }
    let l = cfg.features.clip_samples();
    let clips: Vec<Vec<f32>> = (0..E2E_BATCH)
        .map(|_| (0..l).map(|_| rng.random_range(-0.5f32..0.5)).collect())
        .collect();
    let inputs = model.prepare(&clips)?;
    let (dom, mix, lam) = mixed_labels(rng, E2E_BATCH, cfg.model.classes);
    let coords = random_coords(rng, model.params(), 10);
    let (s, m) = (cfg.train.scale, cfg.train.margin);
    check_param_coords(&model, |m| m.params_mut(), &coords, tol, |model, g| {
        let f = model.forward(g, &inputs, true)?;
        Ok(arcface::combined_loss_graph(g, f.theta, &dom, &mix, lam, s, m)?)
    })
}

pub fn loss_checks(seeds: usize, tol: f64) -> Result<Vec<CheckResult>, ModelError> {
    Ok(vec![
        over_seeds("sigmoid∘linear", seeds, tol, |r| sigmoid_linear_check(r, tol))?,
        over_seeds("arcface loss (embedding)", seeds, tol, |r| arcface_embedding_check(r, tol))?,
        over_seeds("attention (input)", seeds, tol, |r| attention_input_check(r, tol))?,
        over_seeds("attention (params)", seeds, tol, |r| attention_param_check(r, tol))?,
        over_seeds("end-to-end mixup loss", seeds, tol, |r| end_to_end_check(r, tol))?,
    ])
}

/// Everything, `seeds` seeds per check.
pub fn run_suite(seeds: usize, tol: f64) -> Result<Vec<CheckResult>, ModelError> {
    let mut all = layer_checks(seeds, tol)?;
    all.extend(loss_checks(seeds, tol)?);
    Ok(all)
}
