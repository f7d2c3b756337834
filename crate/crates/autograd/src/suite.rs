//! Randomized finite-difference checks over every graph primitive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{finite_diff_check, CheckConfig};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    /// Worst relative error over all seeds.
    pub max_rel_error: f64,
}

type Build = fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `sum(out ⊙ R)` for a fixed random `R`, so every output entry matters.
fn weighted(g: &mut Graph<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let r = g.constant(rand_tensor(&mut rng, &shape))?;
    let m = g.mul(out, r)?;
    g.sum(m)
}

fn causal_mask() -> Vec<bool> {
    (0..20).map(|i| (i % 5) <= (i / 5)).collect()
}

fn cases() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| {
            g.matmul(v[0], v[1])
        }),
        ("transpose", vec![vec![3, 4]], |g, v| g.transpose(v[0])),
        ("add", vec![vec![3, 4], vec![3, 4]], |g, v| {
            g.add(v[0], v[1])
        }),
        ("mul", vec![vec![3, 4], vec![3, 4]], |g, v| {
            g.mul(v[0], v[1])
        }),
        ("add_row", vec![vec![3, 4], vec![4]], |g, v| {
            g.add_row(v[0], v[1])
        }),
        ("scale", vec![vec![2, 5]], |g, v| g.scale(v[0], -0.7)),
        ("linear", vec![vec![3, 4], vec![4, 5], vec![5]], |g, v| {
            g.linear(v[0], v[1], v[2])
        }),
        ("relu", vec![vec![4, 5]], |g, v| g.relu(v[0])),
        ("dropout_off", vec![vec![3, 3]], |g, v| g.dropout(v[0], 0.0)),
        ("softmax", vec![vec![3, 6]], |g, v| {
            g.softmax_rows(v[0], None)
        }),
        ("softmax_masked", vec![vec![4, 5]], |g, v| {
            g.softmax_rows(v[0], Some(&causal_mask()))
        }),
        ("log_softmax", vec![vec![3, 6]], |g, v| {
            g.log_softmax_rows(v[0])
        }),
        ("layer_norm", vec![vec![4, 6], vec![6], vec![6]], |g, v| {
            g.layer_norm(v[0], v[1], v[2])
        }),
        (
            "conv2d",
            vec![vec![2, 5, 4], vec![3, 2, 3, 3], vec![3]],
            |g, v| g.conv2d(v[0], v[1], v[2]),
        ),
        ("maxpool2d", vec![vec![2, 5, 3]], |g, v| g.maxpool2d(v[0])),
        (
            "conv1d_causal",
            vec![vec![5, 3], vec![4, 3, 3], vec![4]],
            |g, v| g.conv1d_causal(v[0], v[1], v[2]),
        ),
        ("embedding", vec![vec![5, 3]], |g, v| {
            g.embedding(v[0], &[4, 0, 4, 2])
        }),
        ("slice_cols", vec![vec![3, 6]], |g, v| {
            g.slice_cols(v[0], 2, 3)
        }),
        ("concat_cols", vec![vec![3, 2], vec![3, 4]], |g, v| {
            g.concat_cols(&[v[0], v[1]])
        }),
        ("channels_to_frames", vec![vec![2, 3, 4]], |g, v| {
            g.channels_to_frames(v[0])
        }),
        ("sum", vec![vec![3, 4]], |g, v| g.sum(v[0])),
        ("mean", vec![vec![3, 4]], |g, v| g.mean(v[0])),
        ("nll", vec![vec![4, 5]], |g, v| {
            let lp = g.log_softmax_rows(v[0])?;
            g.nll(lp, &[Some(1), None, Some(4), Some(0)])
        }),
    ]
}

/// Checks each primitive on `seeds` random parameter draws.
pub fn primitive_suite(seeds: u64) -> Result<Vec<PrimitiveCheck>> {
    let mut out = Vec::new();
    for (name, shapes, build) in cases() {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let ids: Vec<ParamId> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| store.insert(format!("p{i}"), rand_tensor(&mut rng, s)))
                .collect::<Result<_>>()?;
            let report = finite_diff_check(
                |g| {
                    let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
                    let y = build(g, &vars)?;
                    weighted(g, y, seed)
                },
                &store,
                CheckConfig::default(),
            )?;
            worst = worst.max(report.max_rel_error);
        }
        out.push(PrimitiveCheck {
            name,
            max_rel_error: worst,
        });
    }
    Ok(out)
}
