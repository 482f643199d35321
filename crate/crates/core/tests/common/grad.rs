//! Central-difference checks for every differentiable block: tape ops, the
//! entropy model and the full training loss.

use progcloud::codec::{Codec, LossWeights, ModelConfig};
use progcloud::entropy::EntropyModel;
use progcloud::nn::{finite_difference_check, relative_error, GradCheckReport, NnError, ParamStore, Tape, Tensor, Var};
use progcloud::synth::{generate_synthetic, Shape};
use progcloud::train::{DropPolicy, Trainer};
use progcloud::PointCloud;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

fn rnd(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Tensor {
    Tensor::uniform(rows, cols, lo, hi, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Projects onto fixed random weights so no output element is trivially
/// weighted.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var, NnError> {
    let t = tape.value(v);
    let w = rnd(t.rows(), t.cols(), -1.0, 1.0, seed);
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var, NnError>;

/// One check per tape op, each with inputs kept away from kinks.
pub fn tape_op_checks() -> Vec<(&'static str, GradCheckReport)> {
    let a = || rnd(4, 3, -1.0, 1.0, 1);
    let b = || rnd(4, 3, -1.0, 1.0, 2);
    let pos = || rnd(4, 3, 0.5, 2.0, 3);
    let row = || rnd(1, 3, -1.0, 1.0, 4);
    let cases: Vec<(&'static str, Vec<Tensor>, OpFn)> = vec![
        ("matmul", vec![a(), rnd(3, 5, -1.0, 1.0, 5)], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 10)
        }),
        ("add", vec![a(), b()], |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, 11)
        }),
        ("add_row_broadcast", vec![a(), row()], |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, 12)
        }),
        ("sub", vec![a(), b()], |t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y, 13)
        }),
        ("mul", vec![a(), b()], |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, 14)
        }),
        ("mul_row_broadcast", vec![a(), row()], |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, 15)
        }),
        ("scale_add_scalar", vec![a()], |t, v| {
            let y = t.scale(v[0], -2.5);
            let y = t.add_scalar(y, 0.7);
            project(t, y, 16)
        }),
        ("leaky_relu", vec![a()], |t, v| {
            let y = t.leaky_relu(v[0], 0.2);
            project(t, y, 17)
        }),
        ("softplus", vec![a()], |t, v| {
            let y = t.softplus(v[0]);
            project(t, y, 18)
        }),
        ("sigmoid", vec![a()], |t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y, 19)
        }),
        ("tanh", vec![a()], |t, v| {
            let y = t.tanh(v[0]);
            project(t, y, 20)
        }),
        ("exp", vec![a()], |t, v| {
            let y = t.exp(v[0]);
            project(t, y, 21)
        }),
        ("abs", vec![a()], |t, v| {
            let y = t.abs(v[0]);
            project(t, y, 22)
        }),
        ("log", vec![pos()], |t, v| {
            let y = t.log(v[0]);
            project(t, y, 23)
        }),
        ("clamp_min", vec![a()], |t, v| {
            let y = t.clamp_min(v[0], 0.05);
            project(t, y, 24)
        }),
        ("square", vec![a()], |t, v| {
            let y = t.square(v[0]);
            project(t, y, 25)
        }),
        ("sum_mean", vec![a()], |t, v| {
            let s = t.sum(v[0]);
            let m = t.mean(v[0]);
            let s = t.scale(s, 0.3);
            t.add(s, m)
        }),
        ("concat_cols", vec![a(), rnd(4, 2, -1.0, 1.0, 6)], |t, v| {
            let y = t.concat_cols(&[v[0], v[1]])?;
            project(t, y, 26)
        }),
        ("concat_rows", vec![a(), rnd(2, 3, -1.0, 1.0, 7)], |t, v| {
            let y = t.concat_rows(&[v[0], v[1]])?;
            project(t, y, 27)
        }),
        ("gather_rows", vec![a()], |t, v| {
            let y = t.gather_rows(v[0], vec![3, 0, 0, 2, 3, 1, 3])?;
            project(t, y, 28)
        }),
        ("slice_cols_rows", vec![a()], |t, v| {
            let y = t.slice_cols(v[0], 1, 2)?;
            let y = t.slice_rows(y, 1, 2)?;
            project(t, y, 29)
        }),
        ("reshape", vec![a()], |t, v| {
            let y = t.reshape(v[0], 2, 6)?;
            project(t, y, 30)
        }),
        ("group_max", vec![rnd(6, 3, -1.0, 1.0, 8)], |t, v| {
            let y = t.group_max(v[0], 3)?;
            project(t, y, 31)
        }),
        ("linear", vec![a(), rnd(3, 5, -1.0, 1.0, 9), rnd(1, 5, -1.0, 1.0, 40)], |t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            project(t, y, 32)
        }),
        (
            "three_layer_mlp",
            vec![
                rnd(5, 4, -1.0, 1.0, 41),
                rnd(4, 6, -1.0, 1.0, 42),
                rnd(1, 6, -0.3, 0.3, 43),
                rnd(6, 6, -1.0, 1.0, 44),
                rnd(1, 6, -0.3, 0.3, 45),
                rnd(6, 2, -1.0, 1.0, 46),
                rnd(1, 2, -0.3, 0.3, 47),
            ],
            |t, v| {
                let h = t.linear(v[0], v[1], v[2])?;
                let h = t.leaky_relu(h, 0.2);
                let h = t.linear(h, v[3], v[4])?;
                let h = t.tanh(h);
                let y = t.linear(h, v[5], v[6])?;
                let y = t.softplus(y);
                project(t, y, 33)
            },
        ),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| (name, finite_difference_check(&inputs, H, TOL, f).unwrap()))
        .collect()
}

/// Compares `analytic` (one tensor per parameter, store order) with central
/// differences of `eval` taken by perturbing `store` in place.
pub fn param_check(
    store: &mut ParamStore,
    analytic: &[Tensor],
    eval: impl Fn(&ParamStore) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        checked: 0,
        passed: 0,
        worst_rel: 0.0,
    };
    let ids: Vec<usize> = (0..store.len()).collect();
    for id in ids {
        for e in 0..store.value(id).len() {
            let orig = store.value(id).data[e];
            store.value_mut(id).data[e] = orig + H;
            let up = eval(store);
            store.value_mut(id).data[e] = orig - H;
            let down = eval(store);
            store.value_mut(id).data[e] = orig;
            let rel = relative_error(analytic[id].data[e], (up - down) / (2.0 * H), 1e-6);
            report.checked += 1;
            if rel <= TOL {
                report.passed += 1;
            }
            report.worst_rel = report.worst_rel.max(rel);
        }
    }
    report
}

/// Rate of random continuous latents under a fresh entropy model, checked
/// with respect to both its parameters and its input.
pub fn entropy_model_checks() -> Vec<(&'static str, GradCheckReport)> {
    let mut store = ParamStore::new();
    let model = EntropyModel::register(&mut store, "bn", 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    // Perturb the zero-initialized factors so the tanh path carries gradient.
    for p in store.iter_mut() {
        if p.name.contains("factor") {
            p.value = rnd(p.value.rows(), p.value.cols(), -0.5, 0.5, 6);
        }
    }
    let x = rnd(7, 3, -3.0, 3.0, 7);
    let mask = [true, false, true];
    let run = |store: &ParamStore, tape: &mut Tape, xv: Var| -> Result<Var, NnError> {
        let bits = model.bits(tape, store, xv, Some(&mask[..]))?;
        let lik = model.likelihood(tape, store, xv)?;
        let l = project(tape, lik, 50)?;
        tape.add(bits, l)
    };
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let root = run(&store, &mut tape, xv).unwrap();
    let grads = tape.backward(root);
    store.zero_grad();
    tape.accumulate_param_grads(&grads, &mut store);
    let analytic: Vec<Tensor> = store.iter().map(|p| p.grad.clone()).collect();
    let params = param_check(&mut store, &analytic, |s| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let root = run(s, &mut tape, xv).unwrap();
        tape.value(root).data[0]
    });
    let input = finite_difference_check(&[x.clone()], H, TOL, |t, v| run(&store, t, v[0])).unwrap();
    vec![("entropy_model_params", params), ("entropy_model_input", input)]
}

pub fn small_model() -> ModelConfig {
    ModelConfig {
        c: 4,
        c_xyz: 3,
        hidden: 6,
        k: 4,
        seed: 11,
        ..ModelConfig::default()
    }
}

fn trainer(cfg: &ModelConfig, store: ParamStore, seed: u64) -> Trainer {
    let codec = Codec::from_store(cfg.clone(), store).unwrap();
    Trainer::new(
        codec,
        // The coordinate term regresses onto a detached target, so its
        // tape gradient is not the total derivative; it is left out here.
        LossWeights {
            sigma: 1e-2,
            omega: 0.0,
            eta: 1e-2,
            lambda: 1e-2,
        },
        DropPolicy::default(),
        ChaCha8Rng::seed_from_u64(seed),
    )
}

/// Whole training loss (encoder, noise, tail-drop, decoder, entropy models,
/// every loss term) of one step with fixed noise and drop draws.
pub fn codec_loss_check() -> GradCheckReport {
    let cfg = small_model();
    let mut codec = Codec::new(cfg.clone()).unwrap();
    // Nonzero count weights so the density and point-count terms carry
    // gradient too.
    let id = codec.store.id("dec.count.w").unwrap();
    let shape = codec.store.value(id).clone();
    *codec.store.value_mut(id) = rnd(shape.rows(), shape.cols(), -0.05, 0.05, 12);
    let batch: Vec<PointCloud> = vec![
        generate_synthetic(Shape::GaussianClusters, 72, 3.0, 1).unwrap(),
        generate_synthetic(Shape::SphereSurface, 48, 1.0, 2).unwrap(),
    ];
    let mut store = codec.store.clone();
    let mut t = trainer(&cfg, store.clone(), 99);
    t.accumulate(&batch).unwrap();
    let analytic: Vec<Tensor> = t.codec.store.iter().map(|p| p.grad.clone()).collect();
    param_check(&mut store, &analytic, |s| {
        let mut t = trainer(&cfg, s.clone(), 99);
        t.accumulate(&batch).unwrap().loss.total
    })
}
