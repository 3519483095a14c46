//! Gradient cases shared by the gradient and acceptance suites: every tape
//! op, the attention and SSM blocks, and the full toy model against central
//! finite differences.
#![allow(dead_code)]

use rand::Rng;
use stms_core::embedding::EmbedConfig;
use stms_core::gradcheck::{grad_check, grad_check_params, DEFAULT_STEP};
use stms_core::mamba::{MambaBlock, MambaConfig};
use stms_core::param::ParamStore;
use stms_core::rng::rng_for;
use stms_core::transformer::StTransformerBlock;
use stms_core::{Graph, Model, ModelConfig, Result, Tensor, Var};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_for(seed, 0);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Contract an arbitrary-shaped output with fixed random weights so every
/// output coordinate contributes to the scalar.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = g.leaf(random(g.shape(y), seed));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[derive(Clone, Debug)]
pub struct GradResult {
    pub name: String,
    /// Max coordinatewise relative error.
    pub err: f64,
    pub tol: f64,
}

impl GradResult {
    pub fn passed(&self) -> bool {
        self.err < self.tol
    }
}

fn check(out: &mut Vec<GradResult>, name: &str, point: Tensor, tol: f64, f: impl Fn(&mut Graph, Var) -> Result<Var>) {
    let err = grad_check(f, &point, DEFAULT_STEP).unwrap();
    out.push(GradResult { name: name.into(), err, tol });
}

pub fn elementwise_ops() -> Vec<GradResult> {
    let mut r = Vec::new();
    let x = random(&[3, 4], 1);
    check(&mut r, "add", x.clone(), 1e-6, |g, x| {
        let c = g.leaf(random(&[3, 4], 2));
        let y = g.add(x, c)?;
        project(g, y, 3)
    });
    check(&mut r, "sub", x.clone(), 1e-6, |g, x| {
        let c = g.leaf(random(&[3, 4], 2));
        let y = g.sub(c, x)?;
        project(g, y, 3)
    });
    check(&mut r, "mul", x.clone(), 1e-6, |g, x| {
        let y = g.mul(x, x)?;
        project(g, y, 3)
    });
    check(&mut r, "scale", x.clone(), 1e-6, |g, x| {
        let y = g.scale(x, -2.5);
        project(g, y, 3)
    });
    check(&mut r, "exp", x.clone(), 1e-6, |g, x| {
        let y = g.exp(x);
        project(g, y, 3)
    });
    check(&mut r, "softplus", x.scale(3.0), 1e-6, |g, x| {
        let y = g.softplus(x);
        project(g, y, 3)
    });
    // keep points away from the kinks
    let away = x.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    check(&mut r, "relu", away.clone(), 1e-6, |g, x| {
        let y = g.relu(x);
        project(g, y, 3)
    });
    check(&mut r, "abs", away, 1e-6, |g, x| {
        let y = g.abs(x);
        project(g, y, 3)
    });
    check(&mut r, "mean", x, 1e-6, |g, x| {
        let sq = g.mul(x, x)?;
        Ok(g.mean(sq))
    });
    r
}

pub fn row_broadcast_ops() -> Vec<GradResult> {
    let mut r = Vec::new();
    let x = random(&[2, 3, 4], 4);
    check(&mut r, "add_row (x)", x.clone(), 1e-6, |g, x| {
        let r = g.leaf(random(&[4], 5));
        let y = g.add_row(x, r)?;
        project(g, y, 6)
    });
    check(&mut r, "add_row (row)", random(&[4], 5), 1e-6, |g, r| {
        let x = g.leaf(random(&[2, 3, 4], 4));
        let y = g.add_row(x, r)?;
        project(g, y, 6)
    });
    check(&mut r, "mul_row (x)", x, 1e-6, |g, x| {
        let r = g.leaf(random(&[4], 5));
        let y = g.mul_row(x, r)?;
        project(g, y, 6)
    });
    check(&mut r, "mul_row (row)", random(&[4], 5), 1e-6, |g, r| {
        let x = g.leaf(random(&[2, 3, 4], 4));
        let y = g.mul_row(x, r)?;
        project(g, y, 6)
    });
    check(&mut r, "broadcast_to", random(&[3, 1, 2], 7), 1e-6, |g, x| {
        let y = g.broadcast_to(x, &[2, 3, 4, 2])?;
        project(g, y, 8)
    });
    r
}

pub fn contractions() -> Vec<GradResult> {
    let mut r = Vec::new();
    check(&mut r, "matmul (x)", random(&[2, 3, 4], 9), 1e-6, |g, x| {
        let w = g.leaf(random(&[4, 5], 10));
        let y = g.matmul(x, w)?;
        project(g, y, 11)
    });
    check(&mut r, "matmul (w)", random(&[4, 5], 10), 1e-6, |g, w| {
        let x = g.leaf(random(&[2, 3, 4], 9));
        let y = g.matmul(x, w)?;
        project(g, y, 11)
    });
    for trans in [false, true] {
        let bshape: &[usize] = if trans { &[2, 5, 4] } else { &[2, 4, 5] };
        check(&mut r, "batch_matmul (a)", random(&[2, 3, 4], 12), 1e-6, |g, a| {
            let b = g.leaf(random(bshape, 13));
            let y = g.batch_matmul(a, b, trans)?;
            project(g, y, 14)
        });
        check(&mut r, "batch_matmul (b)", random(bshape, 13), 1e-6, |g, b| {
            let a = g.leaf(random(&[2, 3, 4], 12));
            let y = g.batch_matmul(a, b, trans)?;
            project(g, y, 14)
        });
    }
    r
}

pub fn layout_ops() -> Vec<GradResult> {
    let mut r = Vec::new();
    let x = random(&[2, 3, 4], 15);
    check(&mut r, "reshape", x.clone(), 1e-6, |g, x| {
        let y = g.reshape(x, &[6, 4])?;
        project(g, y, 16)
    });
    check(&mut r, "permute", x.clone(), 1e-6, |g, x| {
        let y = g.permute(x, &[2, 0, 1])?;
        project(g, y, 16)
    });
    check(&mut r, "slice", x.clone(), 1e-6, |g, x| {
        let y = g.slice(x, 1, 1, 2)?;
        project(g, y, 16)
    });
    check(&mut r, "concat", x, 1e-6, |g, x| {
        let other = g.leaf(random(&[2, 3, 1], 17));
        let y = g.concat(&[other, x, x], 2)?;
        project(g, y, 16)
    });
    check(&mut r, "gather", random(&[5, 3], 18), 1e-6, |g, t| {
        let y = g.gather(t, &[4, 0, 4, 2])?;
        project(g, y, 19)
    });
    r
}

pub fn normalizations() -> Vec<GradResult> {
    let mut r = Vec::new();
    check(&mut r, "softmax", random(&[3, 5], 20).scale(2.0), 1e-6, |g, x| {
        let y = g.softmax(x)?;
        project(g, y, 21)
    });
    let gamma = random(&[6], 22).map(|v| v + 1.5);
    let beta = random(&[6], 23);
    check(&mut r, "layer_norm (x)", random(&[4, 6], 24).scale(3.0), 1e-6, |g, x| {
        let (gm, bt) = (g.leaf(gamma.clone()), g.leaf(beta.clone()));
        let y = g.layer_norm(x, gm, bt, 1e-5)?;
        project(g, y, 25)
    });
    check(&mut r, "layer_norm (gamma)", gamma.clone(), 1e-6, |g, gm| {
        let x = g.leaf(random(&[4, 6], 24).scale(3.0));
        let bt = g.leaf(beta.clone());
        let y = g.layer_norm(x, gm, bt, 1e-5)?;
        project(g, y, 25)
    });
    check(&mut r, "layer_norm (beta)", beta.clone(), 1e-6, |g, bt| {
        let x = g.leaf(random(&[4, 6], 24).scale(3.0));
        let gm = g.leaf(gamma.clone());
        let y = g.layer_norm(x, gm, bt, 1e-5)?;
        project(g, y, 25)
    });
    r
}

pub fn selective_scan_all_inputs() -> Vec<GradResult> {
    let mut r = Vec::new();
    let (gn, l, di, ds) = (2, 5, 3, 2);
    let inputs = [
        random(&[gn, l, di], 30).map(|v| 0.2 + 0.5 * (v + 1.0)), // delta > 0
        random(&[di, ds], 31).map(|v| -0.5 - (v + 1.0)),        // a < 0
        random(&[gn, l, ds], 32),
        random(&[gn, l, ds], 33),
        random(&[gn, l, di], 34),
        random(&[di], 35),
    ];
    for which in 0..inputs.len() {
        check(&mut r, &format!("selective_scan input {which}"), inputs[which].clone(), 1e-6, |g, x| {
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| if i == which { x } else { g.leaf(t.clone()) })
                .collect();
            let y = g.selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4], vars[5])?;
            project(g, y, 36)
        });
    }
    r
}

pub fn scan_gradient_in_small_step_regime() -> Vec<GradResult> {
    let mut r = Vec::new();
    // Δ·a inside the series branch for part of the entries
    let delta = Tensor::new(vec![1, 3, 2], vec![1e-6, 0.3, 2e-6, 0.5, 1e-6, 0.1]).unwrap();
    let a = Tensor::new(vec![2, 1], vec![-1.0, -2.0]).unwrap();
    check(&mut r, "scan wrt a (series)", a.clone(), 1e-5, |g, av| {
        let d = g.leaf(delta.clone());
        let b = g.leaf(random(&[1, 3, 1], 40));
        let c = g.leaf(random(&[1, 3, 1], 41));
        let u = g.leaf(random(&[1, 3, 2], 42));
        let skip = g.leaf(Tensor::from_vec(vec![0.5, 0.5]));
        let y = g.selective_scan(d, av, b, c, u, skip)?;
        project(g, y, 43)
    });
    r
}

pub fn st_transformer_block() -> Vec<GradResult> {
    let mut r = Vec::new();
    let mut store = ParamStore::new(50);
    let block = StTransformerBlock::new(&mut store, "st", 8, 2).unwrap();
    let z = random(&[1, 3, 4, 8], 51);
    let err = grad_check_params(
        &store,
        |g, p| {
            let zv = g.leaf(z.clone());
            let y = block.forward(g, p, zv, 1e-5)?;
            project(g, y, 52)
        },
        DEFAULT_STEP,
    )
    .unwrap();
    r.push(GradResult { name: "st_transformer_block params".into(), err, tol: 1e-4 });
    check(&mut r, "st block input", z.clone(), 1e-4, |g, zv| {
        let p = store.bind(g);
        let y = block.forward(g, &p, zv, 1e-5)?;
        project(g, y, 52)
    });
    r
}

pub fn mamba_block_full() -> Vec<GradResult> {
    let mut r = Vec::new();
    let cfg = MambaConfig {
        d_model: 4,
        expand: 2,
        d_state: 3,
    };
    let mut store = ParamStore::new(60);
    let block = MambaBlock::new(&mut store, "m", &cfg).unwrap();
    let x = random(&[1, 6, 4], 61);
    let err = grad_check_params(
        &store,
        |g, p| {
            let xv = g.leaf(x.clone());
            let y = block.forward(g, p, xv, 1e-5)?;
            project(g, y, 62)
        },
        DEFAULT_STEP,
    )
    .unwrap();
    r.push(GradResult { name: "mamba_block_full params".into(), err, tol: 1e-4 });
    r
}

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        embed: EmbedConfig {
            d_embed: 2,
            d_adaptive: 2,
            input_len: 2,
            num_nodes: 3,
            input_dim: 1,
            steps_per_day: 288,
        },
        heads: 2,
        attn_layers: 1,
        mamba_layers: 1,
        expand: 2,
        d_state: 3,
        horizon: 2,
        norm_eps: 1e-5,
    }
}

pub fn end_to_end_toy_model() -> Vec<GradResult> {
    let mut r = Vec::new();
    let model = Model::new(toy_model_config(), 70).unwrap();
    assert_eq!(model.config.d_hidden(), 8);
    let x = random(&[1, 2, 3, 1], 71);
    let (weekday, tod) = ([2, 2], [100, 101]);
    // Evaluate near a fit. Temporal key weights reading time-constant
    // embedding dims have exactly zero gradient, so their difference
    // quotient is pure round-off, which shrinks with the residuals.
    let y = {
        let mut g = Graph::inference();
        let p = model.store.bind(&mut g);
        let xv = g.leaf(x.clone());
        let out = model.forward(&mut g, &p, xv, &weekday, &tod).unwrap();
        g.value(out).add(&random(&[1, 2, 3, 1], 72).scale(0.1)).unwrap()
    };
    let err = grad_check_params(
        &model.store,
        |g, p| {
            let xv = g.leaf(x.clone());
            let out = model.forward(g, p, xv, &weekday, &tod)?;
            let target = g.leaf(y.clone());
            let diff = g.sub(out, target)?;
            let sq = g.mul(diff, diff)?;
            Ok(g.mean(sq))
        },
        1e-4,
    )
    .unwrap();
    r.push(GradResult { name: "end_to_end_toy_model params".into(), err, tol: 1e-4 });
    r
}

/// Every case, in a fixed order.
pub fn all() -> Vec<GradResult> {
    [
        elementwise_ops,
        row_broadcast_ops,
        contractions,
        layout_ops,
        normalizations,
        selective_scan_all_inputs,
        scan_gradient_in_small_step_regime,
        st_transformer_block,
        mamba_block_full,
        end_to_end_toy_model,
    ]
    .iter()
    .flat_map(|f| f())
    .collect()
}
