//! Multi-scale attentional attribute retention: per-level channel expansion
//! followed by channel attention, spatial attention, and a triple Hadamard
//! product. Both attention factors are sigmoid outputs, so the result is
//! bounded elementwise by the projected features.

use crate::autodiff::{Tensor, Var};
use crate::error::{DbafError, Result};
use crate::nn::{init_scaled, Graph, Linear, ParamId, ParamRole, ParamStore};
use crate::types::FeaturePyramid;
use ndarray::Array3;
use rand::Rng;

/// Per-level expansion matrices plus the two shared attention perceptrons.
#[derive(Debug, Clone)]
pub struct MaarParams {
    pub w: [ParamId; 3],
    pub phi_ca: Linear,
    pub phi_sa: Linear,
    pub d: usize,
    pub level_channels: [usize; 3],
}

impl MaarParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        role: ParamRole,
        level_channels: [usize; 3],
        d: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = [0, 1, 2].map(|i| {
            store.add(
                format!("{name}.w{i}"),
                role,
                init_scaled(&[level_channels[i], d], level_channels[i], rng),
            )
        });
        let phi_ca = Linear::new(store, &format!("{name}.phi_ca"), role, d, d, true, rng);
        let phi_sa = Linear::new(store, &format!("{name}.phi_sa"), role, 2 * d, d, true, rng);
        Self { w, phi_ca, phi_sa, d, level_channels }
    }
}

// ---- tape-level building blocks ----

/// Channel expansion M W for one level: [k, k, d_i] -> [k, k, d].
pub fn project_t(g: &mut Graph, p: &MaarParams, level: usize, m: Var) -> Var {
    let shape: Vec<usize> = g.tape.shape(m).to_vec();
    let (k, c) = (shape[0], shape[2]);
    assert_eq!(c, p.level_channels[level], "level channel mismatch");
    let flat = g.tape.reshape(m, &[k * k, c]);
    let w = g.p(p.w[level]);
    let proj = g.tape.matmul(flat, w);
    g.tape.reshape(proj, &[k, k, p.d])
}

/// Applies a pointwise perceptron with sigmoid over an [k, k, c_in] map.
fn pointwise_sigmoid(g: &mut Graph, layer: &Linear, x: Var) -> Var {
    let shape: Vec<usize> = g.tape.shape(x).to_vec();
    let (k, c) = (shape[0], shape[2]);
    let flat = g.tape.reshape(x, &[k * k, c]);
    let y = layer.forward(g, flat);
    let s = g.tape.sigmoid(y);
    g.tape.reshape(s, &[k, k, layer.n_out])
}

/// Channel attention over an already expanded map: max/avg pooling along
/// channels, expansion back to full width, fused by a sigmoid perceptron.
pub fn channel_attention_expanded_t(g: &mut Graph, p: &MaarParams, mw: Var) -> Var {
    let shape: Vec<usize> = g.tape.shape(mw).to_vec();
    let (k, d) = (shape[0], shape[2]);
    let cme = g.tape.reduce_max(mw, &[2]);
    let cme = g.tape.broadcast_to(cme, &[k, k, d]);
    let cae = g.tape.reduce_mean(mw, &[2]);
    let cae = g.tape.broadcast_to(cae, &[k, k, d]);
    let sum = g.tape.add(cme, cae);
    pointwise_sigmoid(g, &p.phi_ca, sum)
}

/// Spatial attention: max/avg pooling over positions, expansion, channel
/// concatenation, sigmoid perceptron.
pub fn spatial_attention_t(g: &mut Graph, p: &MaarParams, m_prime: Var) -> Var {
    let shape: Vec<usize> = g.tape.shape(m_prime).to_vec();
    let (k, d) = (shape[0], shape[2]);
    let sme = g.tape.reduce_max(m_prime, &[0, 1]);
    let sme = g.tape.broadcast_to(sme, &[k, k, d]);
    let sae = g.tape.reduce_mean(m_prime, &[0, 1]);
    let sae = g.tape.broadcast_to(sae, &[k, k, d]);
    let cat = g.tape.concat(2, &[sme, sae]);
    pointwise_sigmoid(g, &p.phi_sa, cat)
}

/// Full retention for one level: spatial x channel x projected features.
pub fn enhance_level_t(g: &mut Graph, p: &MaarParams, level: usize, m: Var) -> Var {
    let mw = project_t(g, p, level, m);
    let m_prime = channel_attention_expanded_t(g, p, mw);
    let m_bar = spatial_attention_t(g, p, m_prime);
    let h = g.tape.mul(m_bar, m_prime);
    g.tape.mul(h, mw)
}

// ---- value-level operations ----

fn check_level(m: &Array3<f64>, p: &MaarParams, level: usize) -> Result<()> {
    if level >= 3 {
        return Err(DbafError::shape("level index out of range"));
    }
    let (h, w, c) = m.dim();
    if h != w {
        return Err(DbafError::shape("feature map must be square"));
    }
    if c != p.level_channels[level] {
        return Err(DbafError::shape(format!(
            "level {level} expects {} channels, got {c}",
            p.level_channels[level]
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(DbafError::numeric("feature map has non-finite entries"));
    }
    Ok(())
}

/// Channel attention weights M' for one raw level map (projection included).
pub fn channel_attention(
    m: &Array3<f64>,
    level: usize,
    params: &MaarParams,
    store: &ParamStore,
) -> Result<Array3<f64>> {
    check_level(m, params, level)?;
    let mut g = Graph::new(store);
    let mv = g.tape.leaf(m.clone().into_dyn());
    let mw = project_t(&mut g, params, level, mv);
    let out = channel_attention_expanded_t(&mut g, params, mw);
    Ok(to3(g.tape.value(out)))
}

/// Spatial attention weights from channel attention output (width d).
pub fn spatial_attention(
    m_prime: &Array3<f64>,
    params: &MaarParams,
    store: &ParamStore,
) -> Result<Array3<f64>> {
    let (h, w, c) = m_prime.dim();
    if h != w || c != params.d {
        return Err(DbafError::shape(format!(
            "expected square map with {} channels, got {h}x{w}x{c}",
            params.d
        )));
    }
    let mut g = Graph::new(store);
    let mv = g.tape.leaf(m_prime.clone().into_dyn());
    let out = spatial_attention_t(&mut g, params, mv);
    Ok(to3(g.tape.value(out)))
}

/// Channel expansion M W for one raw level map.
pub fn channel_projection(
    m: &Array3<f64>,
    level: usize,
    params: &MaarParams,
    store: &ParamStore,
) -> Result<Array3<f64>> {
    check_level(m, params, level)?;
    let mut g = Graph::new(store);
    let mv = g.tape.leaf(m.clone().into_dyn());
    let out = project_t(&mut g, params, level, mv);
    Ok(to3(g.tape.value(out)))
}

/// Reweights every level of a raw feature pyramid; all outputs have width d.
pub fn enhance(
    features: &FeaturePyramid,
    params: &MaarParams,
    store: &ParamStore,
) -> Result<FeaturePyramid> {
    let mut out = Vec::with_capacity(3);
    for (level, m) in features.maps().iter().enumerate() {
        check_level(m, params, level)?;
        let mut g = Graph::new(store);
        let mv = g.tape.leaf(m.clone().into_dyn());
        let e = enhance_level_t(&mut g, params, level, mv);
        out.push(to3(g.tape.value(e)));
    }
    FeaturePyramid::new(out)
}

fn to3(t: &Tensor) -> Array3<f64> {
    t.view()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("rank-3 value")
        .to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_gradient, max_relative_error, Tensor};
    use ndarray::{Array1, Array2, Array3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn test_params(channels: [usize; 3], d: usize, seed: u64) -> (ParamStore, MaarParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = MaarParams::new(&mut store, "maar", ParamRole::Generator, channels, d, &mut rng);
        (store, p)
    }

    fn randn3(k: usize, c: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
        Array3::from_shape_fn((k, k, c), |_| StandardNormal.sample(rng))
    }

    /// Brute-force reference for channel attention on tiny inputs.
    fn channel_attention_reference(
        m: &Array3<f64>,
        w: &Array2<f64>,
        ca_w: &Array2<f64>,
        ca_b: &Array1<f64>,
    ) -> Array3<f64> {
        let (k, _, ci) = m.dim();
        let d = w.ncols();
        // projection
        let mut mw = Array3::zeros((k, k, d));
        for y in 0..k {
            for x in 0..k {
                for j in 0..d {
                    let mut acc = 0.0;
                    for i in 0..ci {
                        acc += m[[y, x, i]] * w[[i, j]];
                    }
                    mw[[y, x, j]] = acc;
                }
            }
        }
        // channel pooling + expansion + perceptron
        let mut out = Array3::zeros((k, k, d));
        for y in 0..k {
            for x in 0..k {
                let mut mx = f64::NEG_INFINITY;
                let mut av = 0.0;
                for j in 0..d {
                    mx = mx.max(mw[[y, x, j]]);
                    av += mw[[y, x, j]];
                }
                av /= d as f64;
                let s = mx + av;
                for j in 0..d {
                    let mut acc = ca_b[j];
                    for i in 0..d {
                        acc += s * ca_w[[i, j]];
                    }
                    out[[y, x, j]] = sigmoid(acc);
                }
            }
        }
        out
    }

    fn as2(t: &Tensor) -> Array2<f64> {
        t.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned()
    }
    fn as1(t: &Tensor) -> Array1<f64> {
        t.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned()
    }

    #[test]
    fn constant_map_gives_spatially_constant_weights_from_doubled_pool() {
        let (mut store, p) = test_params([2, 2, 2], 3, 1);
        // equal-entry expansion makes the projected map channel-constant,
        // so channel max-pool equals channel avg-pool
        store.set(p.w[0], Tensor::from_elem(ndarray::IxDyn(&[2, 3]), 0.4));
        let m = Array3::from_elem((4, 4, 2), 0.7);
        let got = channel_attention(&m, 0, &p, &store).unwrap();
        // pooled value: every projected entry is 0.7 * 2 * 0.4 = 0.56
        let pooled = 0.56;
        let ca_w = as2(store.value(p.phi_ca.w));
        let ca_b = as1(store.value(p.phi_ca.b.unwrap()));
        for y in 0..4 {
            for x in 0..4 {
                for j in 0..3 {
                    let mut acc = ca_b[j];
                    for i in 0..3 {
                        acc += 2.0 * pooled * ca_w[[i, j]];
                    }
                    assert!((got[[y, x, j]] - sigmoid(acc)).abs() < 1e-12);
                    // spatially constant
                    assert_eq!(got[[y, x, j]], got[[0, 0, j]]);
                }
            }
        }
    }

    #[test]
    fn attention_outputs_lie_in_unit_interval() {
        let (store, p) = test_params([3, 2, 2], 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = randn3(5, 3, &mut rng);
        let ca = channel_attention(&m, 0, &p, &store).unwrap();
        assert!(ca.iter().all(|&v| v > 0.0 && v < 1.0));
        let sa = spatial_attention(&ca, &p, &store).unwrap();
        assert!(sa.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn seeded_channel_attention_matches_brute_force() {
        let (store, p) = test_params([2, 2, 2], 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = randn3(2, 2, &mut rng);
        let got = channel_attention(&m, 0, &p, &store).unwrap();
        let expect = channel_attention_reference(
            &m,
            &as2(store.value(p.w[0])),
            &as2(store.value(p.phi_ca.w)),
            &as1(store.value(p.phi_ca.b.unwrap())),
        );
        let err = max_relative_error(&got.into_dyn(), &expect.into_dyn(), 1e-9);
        assert!(err < 1e-12, "channel attention mismatch: {err}");
    }

    #[test]
    fn spatial_attention_of_constant_input_is_constant_and_matches_oracle() {
        let (store, p) = test_params([2, 2, 2], 2, 7);
        let mp = Array3::from_elem((3, 3, 2), 0.25);
        let got = spatial_attention(&mp, &p, &store).unwrap();
        // oracle: pooled max = pooled avg = 0.25 per channel; concat -> [0.25, 0.25, 0.25, 0.25]
        let sa_w = as2(store.value(p.phi_sa.w));
        let sa_b = as1(store.value(p.phi_sa.b.unwrap()));
        for j in 0..2 {
            let mut acc = sa_b[j];
            for i in 0..4 {
                acc += 0.25 * sa_w[[i, j]];
            }
            let want = sigmoid(acc);
            for y in 0..3 {
                for x in 0..3 {
                    assert!((got[[y, x, j]] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn seeded_spatial_attention_matches_brute_force() {
        let (store, p) = test_params([2, 2, 2], 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mp = randn3(3, 2, &mut rng).mapv(|v| sigmoid(v)); // inputs in (0,1)
        let got = spatial_attention(&mp, &p, &store).unwrap();
        // brute force
        let d = 2;
        let k = 3;
        let sa_w = as2(store.value(p.phi_sa.w));
        let sa_b = as1(store.value(p.phi_sa.b.unwrap()));
        let mut mx = vec![f64::NEG_INFINITY; d];
        let mut av = vec![0.0; d];
        for y in 0..k {
            for x in 0..k {
                for j in 0..d {
                    mx[j] = mx[j].max(mp[[y, x, j]]);
                    av[j] += mp[[y, x, j]] / (k * k) as f64;
                }
            }
        }
        for j in 0..d {
            let mut acc = sa_b[j];
            for i in 0..d {
                acc += mx[i] * sa_w[[i, j]];
                acc += av[i] * sa_w[[d + i, j]];
            }
            let want = sigmoid(acc);
            for y in 0..k {
                for x in 0..k {
                    assert!((got[[y, x, j]] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_input_enhances_to_zero() {
        let (store, p) = test_params([4, 3, 2], 5, 10);
        let feats = FeaturePyramid::new(vec![
            Array3::zeros((2, 2, 4)),
            Array3::zeros((4, 4, 3)),
            Array3::zeros((8, 8, 2)),
        ])
        .unwrap();
        let out = enhance(&feats, &p, &store).unwrap();
        for m in out.maps() {
            assert!(m.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn saturated_attention_approaches_projection() {
        let (mut store, p) = test_params([2, 2, 2], 2, 11);
        // huge positive biases saturate both sigmoids at ~1
        store.set(p.phi_ca.b.unwrap(), Tensor::from_elem(ndarray::IxDyn(&[2]), 60.0));
        store.set(p.phi_ca.w, crate::nn::zeros(&[2, 2]));
        store.set(p.phi_sa.b.unwrap(), Tensor::from_elem(ndarray::IxDyn(&[2]), 60.0));
        store.set(p.phi_sa.w, crate::nn::zeros(&[4, 2]));
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = randn3(3, 2, &mut rng);
        let mw = channel_projection(&m, 0, &p, &store).unwrap();
        let feats = FeaturePyramid::new(vec![
            m,
            Array3::zeros((4, 4, 2)),
            Array3::zeros((8, 8, 2)),
        ])
        .unwrap();
        let out = enhance(&feats, &p, &store).unwrap();
        let err = max_relative_error(&out.maps()[0].clone().into_dyn(), &mw.into_dyn(), 1e-9);
        assert!(err < 1e-9, "saturated output should match projection: {err}");
    }

    #[test]
    fn enhance_matches_composition_of_public_ops() {
        let (store, p) = test_params([3, 4, 2], 4, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let feats = FeaturePyramid::new(vec![
            randn3(2, 3, &mut rng),
            randn3(4, 4, &mut rng),
            randn3(8, 2, &mut rng),
        ])
        .unwrap();
        let out = enhance(&feats, &p, &store).unwrap();
        for (level, m) in feats.maps().iter().enumerate() {
            let mw = channel_projection(m, level, &p, &store).unwrap();
            let mp = channel_attention(m, level, &p, &store).unwrap();
            let mb = spatial_attention(&mp, &p, &store).unwrap();
            let expect = &mb * &mp * &mw;
            let err = max_relative_error(
                &out.maps()[level].clone().into_dyn(),
                &expect.into_dyn(),
                1e-12,
            );
            assert!(err < 1e-12, "level {level} composition mismatch: {err}");
        }
    }

    #[test]
    fn enhanced_features_are_bounded_by_projection() {
        let (store, p) = test_params([3, 4, 2], 4, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let feats = FeaturePyramid::new(vec![
            randn3(2, 3, &mut rng),
            randn3(4, 4, &mut rng),
            randn3(8, 2, &mut rng),
        ])
        .unwrap();
        let out = enhance(&feats, &p, &store).unwrap();
        for (level, m) in feats.maps().iter().enumerate() {
            let mw = channel_projection(m, level, &p, &store).unwrap();
            for (a, b) in out.maps()[level].iter().zip(mw.iter()) {
                assert!(a.abs() <= b.abs() + 1e-15, "|enhanced| must not exceed |MW|");
            }
            // shape contract: k x k x d
            let (h, w, c) = out.maps()[level].dim();
            assert_eq!(h, w);
            assert_eq!(c, p.d);
        }
    }

    #[test]
    fn enhance_gradients_match_central_differences() {
        let d = 2;
        let (store, p) = test_params([2, 2, 2], d, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let m = randn3(2, 2, &mut rng).into_dyn();
        let inputs = vec![m];
        let eval = |xs: &[Tensor]| -> f64 {
            let mut g = Graph::new(&store);
            let mv = g.tape.leaf(xs[0].clone());
            let e = enhance_level_t(&mut g, &p, 0, mv);
            let s = g.tape.sum_squares(e);
            g.tape.scalar_value(s)
        };
        let mut g = Graph::new(&store);
        let mv = g.tape.leaf(inputs[0].clone());
        let e = enhance_level_t(&mut g, &p, 0, mv);
        let s = g.tape.sum_squares(e);
        let grads = g.tape.backward(s);
        let analytic = grads.get(mv).unwrap().clone();
        let numeric = finite_difference_gradient(eval, &inputs, 0, 1e-5);
        let err = max_relative_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-4, "gradient mismatch: {err}");
    }

    #[test]
    fn enhance_is_deterministic() {
        let (store, p) = test_params([3, 4, 2], 4, 19);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let feats = FeaturePyramid::new(vec![
            randn3(2, 3, &mut rng),
            randn3(4, 4, &mut rng),
            randn3(8, 2, &mut rng),
        ])
        .unwrap();
        let a = enhance(&feats, &p, &store).unwrap();
        let b = enhance(&feats, &p, &store).unwrap();
        assert_eq!(a, b);
    }
}
