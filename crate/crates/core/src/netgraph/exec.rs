use std::collections::{BTreeMap, BTreeSet};

use super::{Layer, NetworkSpec, PoolMode, WeightStore};
use crate::error::{Error, Result};
use crate::tensor::{Conv2dConfig, Graph, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

/// Graph leaves for one unit's tensors.
#[derive(Debug, Clone, Default)]
pub struct UnitParams {
    vars: BTreeMap<String, Var>,
}

impl UnitParams {
    pub(crate) fn from_map(vars: BTreeMap<String, Var>) -> Self {
        UnitParams { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Installs every tensor of `weights` as a graph leaf. Batch-norm running
/// statistics are always constants.
pub fn bind_params(
    g: &mut Graph,
    spec: &NetworkSpec,
    weights: &WeightStore,
    trainable: bool,
) -> Result<Vec<UnitParams>> {
    let mut out = Vec::with_capacity(spec.len());
    for unit in &spec.units {
        let mut p = UnitParams::default();
        for (name, _) in unit.layer.tensor_shapes(spec.in_signature(unit.index)) {
            let t = weights.get(unit.index, name)?.clone();
            let rg = trainable && !matches!(name, "bn_mean" | "bn_var");
            p.vars.insert(name.to_string(), g.leaf(t, rg));
        }
        out.push(p);
    }
    Ok(out)
}

/// Runs every unit of `spec` on `x`, recording the output of each unit
/// listed in `taps`.
pub fn run_units(
    g: &mut Graph,
    spec: &NetworkSpec,
    params: &[UnitParams],
    x: Var,
    taps: &BTreeSet<usize>,
    captured: &mut BTreeMap<usize, Var>,
) -> Result<Var> {
    let mut cur = x;
    for unit in &spec.units {
        let expected = spec.in_signature(unit.index);
        let shape = g.value(cur).shape().to_vec();
        if !expected.matches(&shape) {
            return Err(Error::Dimension(format!(
                "unit {} ({}) expects input {expected}, got shape {shape:?}",
                unit.index, unit.name
            )));
        }
        cur = apply_unit(g, &unit.layer, &params[unit.index], cur)
            .map_err(|e| Error::Dimension(format!("unit {} ({}): {e}", unit.index, unit.name)))?;
        if taps.contains(&unit.index) {
            captured.insert(unit.index, cur);
        }
    }
    Ok(cur)
}

fn apply_unit(g: &mut Graph, layer: &Layer, p: &UnitParams, x: Var) -> Result<Var> {
    match *layer {
        Layer::ConvBlock {
            stride,
            padding,
            norm,
            relu,
            ..
        } => {
            let y = g.conv2d(x, p.get("weight"), Conv2dConfig { stride, padding })?;
            let mut y = g.bias_add(y, p.get("bias"))?;
            if norm == super::Norm::Batch {
                let mean = g.value(p.get("bn_mean")).clone();
                let var = g.value(p.get("bn_var")).clone();
                y = g.batch_norm_inference(
                    y,
                    p.get("bn_gamma"),
                    p.get("bn_beta"),
                    &mean,
                    &var,
                    NORM_EPS,
                )?;
            }
            Ok(if relu { g.relu(y) } else { y })
        }
        Layer::Pool {
            mode,
            kernel,
            stride,
        } => match mode {
            PoolMode::Max => g.max_pool2d(x, kernel, stride),
            PoolMode::Avg => g.avg_pool2d(x, kernel, stride),
        },
        Layer::Dense { relu, .. } => {
            let flat = if g.value(x).rank() > 2 {
                g.flatten(x)?
            } else {
                x
            };
            let y = g.matmul(flat, p.get("weight"))?;
            let y = g.bias_add(y, p.get("bias"))?;
            Ok(if relu { g.relu(y) } else { y })
        }
        Layer::Embed { patch, dim, .. } => {
            let y = g.conv2d(
                x,
                p.get("weight"),
                Conv2dConfig {
                    stride: patch,
                    padding: 0,
                },
            )?;
            let y = g.bias_add(y, p.get("bias"))?;
            let s = g.value(y).shape().to_vec();
            let t = s[2] * s[3];
            let y = g.reshape(y, &[s[0], dim, t])?;
            let y = g.swap_last2(y)?;
            // positional table broadcast over the batch as ones[b,1] · pos[1,t·d]
            let pos = p.get("pos");
            let flat = g.reshape(pos, &[1, t * dim])?;
            let ones = g.constant(Tensor::ones(&[s[0], 1], g.dtype(pos)));
            let tiled = g.matmul(ones, flat)?;
            let tiled = g.reshape(tiled, &[s[0], t, dim])?;
            g.add(y, tiled)
        }
        Layer::TokenBlock { .. } => {
            let h = g.layer_norm(x, p.get("ln_gamma"), p.get("ln_beta"), NORM_EPS)?;
            let h = g.token_linear(h, p.get("w1"))?;
            let h = g.bias_add(h, p.get("b1"))?;
            let h = g.relu(h);
            let h = g.token_linear(h, p.get("w2"))?;
            let h = g.bias_add(h, p.get("b2"))?;
            g.add(x, h)
        }
        Layer::Head { .. } => {
            let flat = match g.value(x).rank() {
                2 => x,
                3 => g.mean_tokens(x)?,
                _ => g.flatten(x)?,
            };
            let y = g.matmul(flat, p.get("weight"))?;
            g.bias_add(y, p.get("bias"))
        }
    }
}

fn check_batch(spec: &NetworkSpec, batch: &Tensor) -> Result<()> {
    if !spec.input_signature.matches(batch.shape()) {
        return Err(Error::Dimension(format!(
            "{} expects input {}, got batch shape {:?}",
            spec.model_id,
            spec.input_signature,
            batch.shape()
        )));
    }
    Ok(())
}

/// Output of the final unit (logits for a complete classifier).
pub fn forward(spec: &NetworkSpec, weights: &WeightStore, batch: &Tensor) -> Result<Tensor> {
    Ok(forward_with_taps(spec, weights, batch, &BTreeSet::new())?.0)
}

/// Forward pass that also returns the activation after each tapped unit.
pub fn forward_with_taps(
    spec: &NetworkSpec,
    weights: &WeightStore,
    batch: &Tensor,
    taps: &BTreeSet<usize>,
) -> Result<(Tensor, BTreeMap<usize, Tensor>)> {
    if let Some(&bad) = taps.iter().find(|&&i| i >= spec.len()) {
        return Err(Error::Lookup(format!(
            "tap index {bad} not in {} (has {} units)",
            spec.model_id,
            spec.len()
        )));
    }
    check_batch(spec, batch)?;
    let mut g = Graph::new();
    let params = bind_params(&mut g, spec, weights, false)?;
    let x = g.constant(batch.clone());
    let mut captured = BTreeMap::new();
    let out = run_units(&mut g, spec, &params, x, taps, &mut captured)?;
    let captures = captured
        .into_iter()
        .map(|(i, v)| (i, g.value(v).clone()))
        .collect();
    Ok((g.value(out).clone(), captures))
}

#[cfg(test)]
mod tests {
    use super::super::tests::toy_cnn;
    use super::super::{compose, split, Network, Signature};
    use super::*;
    use crate::tensor::DType;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, dtype, &mut rng)
    }

    fn toy_net(dtype: DType) -> Network {
        let spec = toy_cnn();
        let w = WeightStore::init(&spec, 1, dtype);
        Network::new(spec, w).unwrap()
    }

    fn token_net() -> Network {
        let spec = NetworkSpec::build(
            "tok",
            Signature::Spatial { c: 3, h: 8, w: 8 },
            vec![
                (
                    "embed".into(),
                    Layer::Embed {
                        in_channels: 3,
                        dim: 12,
                        patch: 2,
                    },
                ),
                (
                    "blk0".into(),
                    Layer::TokenBlock {
                        dim: 12,
                        hidden: 24,
                    },
                ),
                (
                    "blk1".into(),
                    Layer::TokenBlock {
                        dim: 12,
                        hidden: 24,
                    },
                ),
                (
                    "head".into(),
                    Layer::Head {
                        in_features: 12,
                        classes: 5,
                    },
                ),
            ],
        )
        .unwrap();
        let w = WeightStore::init(&spec, 2, DType::F64);
        Network::new(spec, w).unwrap()
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut net = toy_net(DType::F64);
        let head = net.spec.len() - 1;
        for name in ["weight", "bias"] {
            let shape = net.weights.get(head, name).unwrap().shape().to_vec();
            net.weights
                .insert(head, name, Tensor::zeros(&shape, DType::F64));
        }
        let logits = net.forward(&batch(&[3, 3, 8, 8], 1, DType::F64)).unwrap();
        assert_eq!(logits.shape(), &[3, 10]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_chain_matches_hand_composition() {
        let spec = NetworkSpec::build(
            "mlp",
            Signature::Vector { d: 3 },
            vec![
                (
                    "d0".into(),
                    Layer::Dense {
                        in_features: 3,
                        out_features: 4,
                        relu: false,
                    },
                ),
                (
                    "head".into(),
                    Layer::Head {
                        in_features: 4,
                        classes: 2,
                    },
                ),
            ],
        )
        .unwrap();
        let w = WeightStore::init(&spec, 9, DType::F64);
        let x = batch(&[1, 3], 4, DType::F64);
        let got = forward(&spec, &w, &x).unwrap();
        let w0 = w.get(0, "weight").unwrap();
        let b0 = w.get(0, "bias").unwrap();
        let w1 = w.get(1, "weight").unwrap();
        let b1 = w.get(1, "bias").unwrap();
        let mut h = [0.0; 4];
        for (o, ho) in h.iter_mut().enumerate() {
            *ho = b0.data()[o] + (0..3).map(|i| x.data()[i] * w0.at(&[i, o])).sum::<f64>();
        }
        for c in 0..2 {
            let want = b1.data()[c] + (0..4).map(|o| h[o] * w1.at(&[o, c])).sum::<f64>();
            assert!((got.at(&[0, c]) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn taps_do_not_change_logits() {
        let net = toy_net(DType::F32);
        let x = batch(&[4, 3, 8, 8], 2, DType::F32);
        let plain = net.forward(&x).unwrap();
        let taps: BTreeSet<usize> = (0..net.spec.len()).collect();
        let (tapped, caps) = forward_with_taps(&net.spec, &net.weights, &x, &taps).unwrap();
        assert_eq!(plain, tapped);
        assert_eq!(caps.len(), net.spec.len());
        let (same, none) =
            forward_with_taps(&net.spec, &net.weights, &x, &BTreeSet::new()).unwrap();
        assert!(none.is_empty());
        assert_eq!(same, plain);
    }

    #[test]
    fn tap_equals_standalone_prefix() {
        let net = toy_net(DType::F64);
        let x = batch(&[4, 3, 8, 8], 3, DType::F64);
        let taps: BTreeSet<usize> = (0..net.spec.len()).collect();
        let (_, caps) = forward_with_taps(&net.spec, &net.weights, &x, &taps).unwrap();
        for m in 0..net.spec.len() {
            let prefix = net.slice(0..m + 1).unwrap();
            assert_eq!(prefix.forward(&x).unwrap(), caps[&m], "unit {m}");
        }
        // the unit before the head taps exactly what the head consumes
        let before_head = net
            .slice(0..net.spec.len() - 1)
            .unwrap()
            .forward(&x)
            .unwrap();
        assert_eq!(caps[&(net.spec.len() - 2)], before_head);
    }

    #[test]
    fn unknown_tap_is_lookup_error() {
        let net = toy_net(DType::F64);
        let x = batch(&[2, 3, 8, 8], 3, DType::F64);
        let taps: BTreeSet<usize> = [7].into();
        let err = forward_with_taps(&net.spec, &net.weights, &x, &taps).unwrap_err();
        assert!(matches!(err, Error::Lookup(_)));
    }

    #[test]
    fn wrong_batch_shape_names_the_model() {
        let net = toy_net(DType::F64);
        let err = net
            .forward(&batch(&[2, 4, 8, 8], 3, DType::F64))
            .unwrap_err();
        assert!(err.to_string().contains("toy"), "{err}");
    }

    #[test]
    fn split_recompose_is_bit_identical() {
        for net in [toy_net(DType::F32), token_net()] {
            let x = batch(&[5, 3, 8, 8], 4, net.weights.dtype().unwrap());
            let want = net.forward(&x).unwrap();
            for at in 1..net.spec.len() {
                let (a, b) = split(&net, at).unwrap();
                assert_eq!(a.spec.len(), at);
                assert_eq!(
                    a.spec.total_params() + b.spec.total_params(),
                    net.spec.total_params()
                );
                let joined = compose(&a, &b).unwrap();
                assert_eq!(joined.forward(&x).unwrap(), want);
                let staged = b.forward(&a.forward(&x).unwrap()).unwrap();
                assert_eq!(staged, want);
            }
        }
    }

    #[test]
    fn split_bounds() {
        let net = toy_net(DType::F64);
        assert!(matches!(split(&net, 0), Err(Error::Range(_))));
        assert!(matches!(split(&net, net.spec.len()), Err(Error::Range(_))));
    }

    #[test]
    fn five_unit_split_at_two() {
        let spec = NetworkSpec::build(
            "five",
            Signature::Vector { d: 4 },
            (0..4)
                .map(|i| {
                    (
                        format!("d{i}"),
                        Layer::Dense {
                            in_features: 4,
                            out_features: 4,
                            relu: true,
                        },
                    )
                })
                .chain([(
                    "head".to_string(),
                    Layer::Head {
                        in_features: 4,
                        classes: 3,
                    },
                )])
                .collect(),
        )
        .unwrap();
        let net = Network::new(spec.clone(), WeightStore::init(&spec, 0, DType::F64)).unwrap();
        let (a, b) = split(&net, 2).unwrap();
        let names = |n: &Network| {
            n.spec
                .units
                .iter()
                .map(|u| u.name.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(names(&a), ["d0", "d1"]);
        assert_eq!(names(&b), ["d2", "d3", "head"]);
        assert_eq!(b.spec.units[0].index, 0);
    }

    #[test]
    fn token_network_runs() {
        let net = token_net();
        let x = batch(&[2, 3, 8, 8], 5, DType::F64);
        let logits = net.forward(&x).unwrap();
        assert_eq!(logits.shape(), &[2, 5]);
        assert_eq!(
            net.spec.units[0].out_signature,
            Signature::Tokens { t: 16, d: 12 }
        );
    }
}
