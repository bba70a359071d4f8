use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Probe at most this many coordinates per leaf (sampled without
    /// replacement); `None` probes every coordinate.
    pub max_coords_per_leaf: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_leaf: None,
            seed: 0,
        }
    }
}

impl GradCheckOptions {
    pub fn with_eps(eps: f64) -> Self {
        Self {
            eps,
            ..Self::default()
        }
    }
}

fn eval_scalar<F>(f: &F, leaves: &[Tensor], requires_grad: bool) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph<'_>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids = leaves
        .iter()
        .map(|t| g.param(t, requires_grad))
        .collect::<Result<Vec<_>>>()?;
    let sink = f(&mut g, &ids)?;
    let value = g.scalar(sink)?;
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite sink value while probing".into()));
    }
    if !requires_grad {
        return Ok((value, Vec::new()));
    }
    let grads = g.backward(sink)?;
    let grads = ids
        .iter()
        .zip(leaves)
        .map(|(&id, t)| grads.get_or_zeros(id, t))
        .collect();
    Ok((value, grads))
}

/// Compares reverse-mode gradients with central differences.
///
/// Returns `max |analytic - numeric| / (1 + |analytic|)` over the probed
/// coordinates of every leaf.
pub fn grad_check<F>(f: F, leaves: &[Tensor], opts: &GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(Error::Contract(format!(
            "grad_check eps {} outside [1e-7, 1e-3]",
            opts.eps
        )));
    }
    let (_, analytic) = eval_scalar(&f, leaves, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = leaves.to_vec();
    let mut worst = 0.0f64;
    for (li, leaf) in leaves.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords_per_leaf {
            Some(k) if k < leaf.len() => {
                let mut c = sample(&mut rng, leaf.len(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..leaf.len()).collect(),
        };
        for c in coords {
            let orig = leaf.data()[c];
            probe[li].data_mut()[c] = orig + opts.eps;
            let (plus, _) = eval_scalar(&f, &probe, false)?;
            probe[li].data_mut()[c] = orig - opts.eps;
            let (minus, _) = eval_scalar(&f, &probe, false)?;
            probe[li].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[li].data()[c];
            worst = worst.max((a - numeric).abs() / (1.0 + a.abs()));
        }
    }
    Ok(worst)
}
